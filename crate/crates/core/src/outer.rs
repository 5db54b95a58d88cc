//! Outer approximation of the region of attraction.
//!
//! The moment side lives in the dual of the conic program: one measure block
//! each for the occupation measure `mu`, the terminal measures `mu_T1`
//! (on the target) and `mu_T2` (on X), and the control measures `sigma_i`
//! with their slacks `sigma_hat_i`. The primal free columns are the
//! coefficients of the certificate polynomials `v` and `p_i`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, ConicError, ConicProgram, ProgramBuilder, SolverSettings, Status};
use crate::polyalg::{monomial_basis, MultiIndex, Polynomial};
use crate::semisets::{MonteCarloSpec, ProblemSets, SemialgebraicSet, SetError};
use crate::sosmom::{compile_measure_block, MeasureBlock, MomentError, MomentVector};
use crate::verify::{check_nonneg, InequalityReport, SampleSpec};

#[derive(Debug, Error)]
pub enum OuterError {
    #[error("invalid control system: {0}")]
    InvalidSystem(String),
    #[error(transparent)]
    Degree(#[from] MomentError),
    #[error(transparent)]
    Set(#[from] SetError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error("solver finished with status {status:?} (residuals {residuals:?})")]
    Solver { status: Status, residuals: conic::Residuals },
    #[error("certificate rejected: {name} violated at {violations} of {samples} samples (worst {worst:e})")]
    CertificateRejected {
        name: String,
        violations: usize,
        samples: usize,
        worst: f64,
    },
    #[error("point {0:?} lies outside the closure of X")]
    OutOfDomain(Vec<f64>),
}

/// Input box `[lo_i, hi_i]` per channel, mapped onto the canonical
/// `[0, u_max]^m` by `u_user = lo + scale * u`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InputBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputBox {
    pub fn canonical(m: usize, u_max: f64) -> Self {
        InputBox {
            lo: vec![0.0; m],
            hi: vec![u_max; m],
        }
    }

    pub fn u_max(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).fold(0.0, f64::max)
    }

    /// Per-channel factor from canonical to user units.
    pub fn scales(&self) -> Vec<f64> {
        let um = self.u_max();
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| if um > 0.0 { (b - a) / um } else { 0.0 })
            .collect()
    }
}

/// `xdot = f(x) + sum_i g_i(x) u_i` with `u in [0, u_max]^m`.
#[derive(Clone, Debug)]
pub struct ControlSystem {
    pub f: Vec<Polynomial>,
    /// Input directions: `g[i]` is the column of G multiplying `u_i`.
    pub g: Vec<Vec<Polynomial>>,
    pub sets: ProblemSets,
    pub beta: f64,
}

impl ControlSystem {
    pub fn new(f: Vec<Polynomial>, g: Vec<Vec<Polynomial>>, sets: ProblemSets, beta: f64) -> Result<Self, OuterError> {
        let n = sets.nvars();
        if f.len() != n {
            return Err(OuterError::InvalidSystem(format!("f has {} components, expected {n}", f.len())));
        }
        if g.len() != sets.m {
            return Err(OuterError::InvalidSystem(format!("G has {} columns, expected {}", g.len(), sets.m)));
        }
        if let Some(col) = g.iter().find(|c| c.len() != n) {
            return Err(OuterError::InvalidSystem(format!("G column has {} entries, expected {n}", col.len())));
        }
        if f.iter().chain(g.iter().flatten()).any(|p| p.nvars() != n) {
            return Err(OuterError::InvalidSystem("polynomial in the wrong number of variables".into()));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(OuterError::InvalidSystem(format!("beta must be positive, got {beta}")));
        }
        Ok(ControlSystem { f, g, sets, beta })
    }

    /// Builds the canonical system for inputs in an arbitrary box: the drift
    /// absorbs `G lo` and each column is rescaled to the common width.
    pub fn with_input_box(
        f: Vec<Polynomial>,
        g: Vec<Vec<Polynomial>>,
        x: SemialgebraicSet,
        target: SemialgebraicSet,
        input: &InputBox,
        beta: f64,
    ) -> Result<Self, OuterError> {
        if input.lo.len() != g.len() || input.hi.len() != g.len() {
            return Err(OuterError::InvalidSystem("input box dimension differs from G".into()));
        }
        if input.lo.iter().zip(&input.hi).any(|(a, b)| !(a <= b)) {
            return Err(OuterError::InvalidSystem("input box has lo > hi".into()));
        }
        let mut f = f;
        for (col, &lo) in g.iter().zip(&input.lo) {
            for (fi, gi) in f.iter_mut().zip(col) {
                *fi = fi.clone() + gi.scale(lo);
            }
        }
        let g = g
            .iter()
            .zip(input.scales())
            .map(|(col, s)| col.iter().map(|p| p.scale(s)).collect())
            .collect();
        let sets = ProblemSets::new(x, target, input.u_max(), input.lo.len())?;
        ControlSystem::new(f, g, sets, beta)
    }

    pub fn nvars(&self) -> usize {
        self.f.len()
    }

    pub fn ninputs(&self) -> usize {
        self.g.len()
    }

    pub fn max_degree(&self) -> usize {
        self.f
            .iter()
            .chain(self.g.iter().flatten())
            .map(|p| p.degree())
            .chain([self.sets.x.max_degree(), self.sets.target.max_degree()])
            .max()
            .unwrap_or(0)
    }
}

/// Assembled outer program with the handles needed to decode a solution.
#[derive(Clone, Debug)]
pub struct OuterProgram {
    pub k: usize,
    pub program: ConicProgram,
    pub builder: ProgramBuilder,
    pub mu: MeasureBlock,
    pub mu_t1: MeasureBlock,
    pub mu_t2: MeasureBlock,
    pub sigma: Vec<MeasureBlock>,
    pub sigma_hat: Vec<MeasureBlock>,
    /// Test monomials; `v` has one free column per entry starting at `v_start`.
    pub v_basis: Vec<MultiIndex>,
    pub v_start: usize,
    /// One free column per monomial of degree `<= 2k` for each `p_i`.
    pub p_basis: Vec<MultiIndex>,
    pub p_start: Vec<usize>,
}

impl OuterProgram {
    /// Mass rows of every measure, used to shift the certificate constants.
    fn mass_rows(&self) -> Vec<usize> {
        let mut rows = vec![self.mu.mass_row(), self.mu_t1.mass_row(), self.mu_t2.mass_row()];
        rows.extend(self.sigma.iter().chain(&self.sigma_hat).map(|m| m.mass_row()));
        rows
    }

    pub fn decode_v(&self, x: &[f64]) -> Polynomial {
        Polynomial::from_coefficients(&self.v_basis, &x[self.v_start..self.v_start + self.v_basis.len()])
    }

    pub fn decode_p(&self, x: &[f64]) -> Vec<Polynomial> {
        self.p_start
            .iter()
            .map(|&s| Polynomial::from_coefficients(&self.p_basis, &x[s..s + self.p_basis.len()]))
            .collect()
    }
}

/// Monomials `x^alpha` whose Liouville images stay within degree `d`.
pub fn test_monomials(sys: &ControlSystem, d: usize) -> Vec<MultiIndex> {
    monomial_basis(sys.nvars(), d)
        .into_iter()
        .filter(|a| {
            let v = Polynomial::monomial(a.clone(), 1.0);
            let lf = v.lie_derivative(&sys.f).expect("dimensions checked");
            lf.degree() <= d
                && sys
                    .g
                    .iter()
                    .all(|col| v.lie_derivative(col).expect("dimensions checked").degree() <= d)
        })
        .collect()
}

pub fn assemble_outer(sys: &ControlSystem, k: usize) -> Result<OuterProgram, OuterError> {
    let d = 2 * k;
    let need = sys.max_degree();
    if d < need {
        return Err(MomentError::DegreeShortfall { needed: need, available: d }.into());
    }
    let n = sys.nvars();
    let x = &sys.sets.x;
    let mut b = ProgramBuilder::new();
    let mu = compile_measure_block(&mut b, x, d)?;
    let mu_t1 = compile_measure_block(&mut b, &sys.sets.target, d)?;
    let mu_t2 = compile_measure_block(&mut b, x, d)?;
    let mut sigma = Vec::new();
    let mut sigma_hat = Vec::new();
    for _ in 0..sys.ninputs() {
        sigma.push(compile_measure_block(&mut b, x, d)?);
        sigma_hat.push(compile_measure_block(&mut b, x, d)?);
    }
    b.add_rhs(mu_t1.mass_row(), 1.0);
    b.add_rhs(mu_t2.mass_row(), -1.0);

    let leb = x.lebesgue_moments(d, MonteCarloSpec::default())?.moments;
    let v_basis = test_monomials(sys, d);
    let v_start = b.add_free(v_basis.len());
    for (j, a) in v_basis.iter().enumerate() {
        let col = v_start + j;
        let xa = Polynomial::monomial(a.clone(), 1.0);
        let lf = xa.lie_derivative(&sys.f).expect("dimensions checked");
        for (r, v) in mu.functional(&(xa.scale(sys.beta) - lf)) {
            b.coef_free(r, col, v);
        }
        for blk in [&mu_t1, &mu_t2] {
            for (r, v) in blk.functional(&xa) {
                b.coef_free(r, col, v);
            }
        }
        for (gcol, s) in sys.g.iter().zip(&sigma) {
            let lg = xa.lie_derivative(gcol).expect("dimensions checked");
            for (r, v) in s.functional(&lg) {
                b.coef_free(r, col, -v);
            }
        }
        b.cost_free(col, leb.get(a));
    }

    let p_basis = monomial_basis(n, d);
    let mut p_start = Vec::new();
    for (s, sh) in sigma.iter().zip(&sigma_hat) {
        let start = b.add_free(p_basis.len());
        for (j, a) in p_basis.iter().enumerate() {
            let xa = Polynomial::monomial(a.clone(), 1.0);
            for blk in [s, sh] {
                for (r, v) in blk.functional(&xa) {
                    b.coef_free(r, start + j, v);
                }
            }
            for (r, v) in mu.functional(&xa) {
                b.coef_free(r, start + j, -sys.sets.u_max * v);
            }
        }
        p_start.push(start);
    }

    let program = b.build()?;
    Ok(OuterProgram {
        k,
        program,
        builder: b,
        mu,
        mu_t1,
        mu_t2,
        sigma,
        sigma_hat,
        v_basis,
        v_start,
        p_basis,
        p_start,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OuterMoments {
    pub mu: MomentVector,
    pub mu_t1: MomentVector,
    pub mu_t2: MomentVector,
    pub sigma: Vec<MomentVector>,
    pub sigma_hat: Vec<MomentVector>,
}

#[derive(Clone, Debug)]
pub struct OuterCertificate {
    pub v: Polynomial,
    pub p: Vec<Polynomial>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: String,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// Constant margin added to every certificate inequality.
    pub margin: f64,
    pub checks: Vec<InequalityReport>,
}

#[derive(Clone, Debug)]
pub struct OuterResult {
    pub k: usize,
    pub beta: f64,
    pub u_max: f64,
    pub domain: SemialgebraicSet,
    pub moments: OuterMoments,
    pub certificate: OuterCertificate,
    /// `mass(mu_T1) - mass(mu_T2)`.
    pub objective: f64,
    /// `integral of v over X`.
    pub dual_objective: f64,
    pub report: SolveReport,
}

/// Constant shifts tried in turn when the plain certificate fails sampling.
pub const MARGINS: [f64; 3] = [0.0, 1e-5, 1e-4];
/// SlowProgress is accepted when every residual is below this level.
pub const SLOW_PROGRESS_RESIDUAL: f64 = 1e-5;

pub fn solve_outer(sys: &ControlSystem, k: usize, settings: &SolverSettings) -> Result<OuterResult, OuterError> {
    solve_outer_with(sys, k, settings, &SampleSpec::default())
}

pub fn solve_outer_with(
    sys: &ControlSystem,
    k: usize,
    settings: &SolverSettings,
    samples: &SampleSpec,
) -> Result<OuterResult, OuterError> {
    let asm = assemble_outer(sys, k)?;
    let x_pts = crate::semisets::sample(&sys.sets.x, samples.count, samples.seed)?;
    let t_pts = crate::semisets::sample(&sys.sets.target, samples.count, samples.seed ^ 0x7)?;
    let mut last_err = None;
    for &eps in &MARGINS {
        let mut prog = asm.program.clone();
        for r in asm.mass_rows() {
            prog.b[r] += eps;
        }
        let sol = conic::solve(&prog, settings)?;
        let acceptable = match sol.status {
            Status::Optimal => true,
            Status::SlowProgress => {
                let r = sol.residuals;
                r.primal.max(r.dual).max(r.gap) <= SLOW_PROGRESS_RESIDUAL
            }
            _ => false,
        };
        if !acceptable {
            last_err = Some(OuterError::Solver {
                status: sol.status,
                residuals: sol.residuals,
            });
            continue;
        }
        let cert = OuterCertificate {
            v: asm.decode_v(&sol.primal),
            p: asm.decode_p(&sol.primal),
        };
        let checks = outer_checks(sys, &cert, &x_pts, &t_pts);
        if let Some(bad) = checks.iter().find(|c| !c.passed) {
            last_err = Some(OuterError::CertificateRejected {
                name: bad.name.clone(),
                violations: bad.violations,
                samples: bad.samples,
                worst: bad.worst,
            });
            continue;
        }
        let moments = OuterMoments {
            mu: asm.mu.decode(&sol.dual),
            mu_t1: asm.mu_t1.decode(&sol.dual),
            mu_t2: asm.mu_t2.decode(&sol.dual),
            sigma: asm.sigma.iter().map(|m| m.decode(&sol.dual)).collect(),
            sigma_hat: asm.sigma_hat.iter().map(|m| m.decode(&sol.dual)).collect(),
        };
        let objective = moments.mu_t1.mass() - moments.mu_t2.mass();
        return Ok(OuterResult {
            k,
            beta: sys.beta,
            u_max: sys.sets.u_max,
            domain: sys.sets.x.clone(),
            moments,
            certificate: cert,
            objective,
            dual_objective: sol.primal_objective,
            report: SolveReport {
                status: format!("{:?}", sol.status),
                iterations: sol.iterations,
                primal_residual: sol.residuals.primal,
                dual_residual: sol.residuals.dual,
                gap: sol.residuals.gap,
                primal_objective: sol.primal_objective,
                dual_objective: sol.dual_objective,
                margin: eps,
                checks,
            },
        });
    }
    Err(last_err.expect("at least one margin is tried"))
}

/// Sampled checks of the outer certificate inequalities.
pub fn outer_checks(sys: &ControlSystem, cert: &OuterCertificate, x_pts: &[Vec<f64>], t_pts: &[Vec<f64>]) -> Vec<InequalityReport> {
    let n = sys.nvars();
    let v = &cert.v;
    let one = Polynomial::constant(n, 1.0);
    let lf = v.lie_derivative(&sys.f).expect("dimensions checked");
    let mut decay = v.scale(sys.beta) - lf;
    for p in &cert.p {
        decay = decay - p.scale(sys.sets.u_max);
    }
    let mut out = vec![
        check_nonneg("beta v - L_f v - u_max sum p >= 0 on X", &decay, x_pts),
        check_nonneg("v - 1 >= 0 on X_T", &(v.clone() - one.clone()), t_pts),
        check_nonneg("v + 1 >= 0 on X", &(v.clone() + one), x_pts),
    ];
    for (i, (p, col)) in cert.p.iter().zip(&sys.g).enumerate() {
        let lg = v.lie_derivative(col).expect("dimensions checked");
        out.push(check_nonneg(&format!("p_{} - L_G{} v >= 0 on X", i + 1, i + 1), &(p.clone() - lg), x_pts));
        out.push(check_nonneg(&format!("p_{} >= 0 on X", i + 1), p, x_pts));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Membership {
    Inside,
    Outside,
}

/// Membership in `{x in X : v(x) > 0}`.
pub fn outer_membership(res: &OuterResult, x: &[f64]) -> Result<Membership, OuterError> {
    if x.len() != res.domain.nvars() || !res.domain.contains(x, 1e-12) {
        return Err(OuterError::OutOfDomain(x.to_vec()));
    }
    Ok(if res.certificate.v.eval(x) > 0.0 {
        Membership::Inside
    } else {
        Membership::Outside
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyalg::count_up_to;

    fn p(n: usize, s: &str) -> Polynomial {
        Polynomial::parse(n, s).unwrap()
    }

    pub(crate) fn double_integrator(beta: f64) -> ControlSystem {
        ControlSystem::with_input_box(
            vec![p(2, "x2 + 0.1*x1^3"), p(2, "0")],
            vec![vec![p(2, "0"), p(2, "0.3")]],
            SemialgebraicSet::ball(&[0.0, 0.0], 1.2),
            SemialgebraicSet::ball(&[0.0, 0.0], 0.1),
            &InputBox {
                lo: vec![-1.0],
                hi: vec![1.0],
            },
            beta,
        )
        .unwrap()
    }

    fn one_d() -> ControlSystem {
        ControlSystem::with_input_box(
            vec![p(1, "0")],
            vec![vec![p(1, "1")]],
            SemialgebraicSet::boxed(&[-1.0], &[1.0]),
            SemialgebraicSet::boxed(&[-0.1], &[0.1]),
            &InputBox {
                lo: vec![-1.0],
                hi: vec![1.0],
            },
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn input_box_shifts_drift() {
        let sys = double_integrator(1.0);
        assert_eq!(sys.sets.u_max, 2.0);
        assert_eq!(sys.f[1], p(2, "-0.3"));
        assert_eq!(sys.g[0][1], p(2, "0.3"));
    }

    #[test]
    fn double_integrator_k4_has_45_mu_moments() {
        let asm = assemble_outer(&double_integrator(1.0), 4).unwrap();
        assert_eq!(asm.mu.num_rows(), 45);
        assert_eq!(asm.mu.row_monomials().len(), count_up_to(2, 8));
        assert_eq!(asm.sigma.len(), 1);
    }

    #[test]
    fn degree_shortfall() {
        assert!(matches!(
            assemble_outer(&double_integrator(1.0), 1),
            Err(OuterError::Degree(MomentError::DegreeShortfall { needed: 3, available: 2 }))
        ));
    }

    #[test]
    fn no_inputs_means_no_sigma_blocks() {
        let sets = ProblemSets::new(
            SemialgebraicSet::ball(&[0.0, 0.0], 1.0),
            SemialgebraicSet::ball(&[0.0, 0.0], 0.2),
            0.0,
            0,
        )
        .unwrap();
        let sys = ControlSystem::new(vec![p(2, "-x1"), p(2, "-x2")], vec![], sets, 1.0).unwrap();
        let asm = assemble_outer(&sys, 2).unwrap();
        assert!(asm.sigma.is_empty() && asm.p_start.is_empty());
        // every Liouville column touches only mu, mu_T1 and mu_T2
        let last = asm.mu_t2.first_row() + asm.mu_t2.num_rows();
        for j in 0..asm.v_basis.len() {
            assert!(asm.program.a.col(asm.v_start + j).all(|(r, _)| r < last));
        }
    }

    #[test]
    fn liouville_row_coefficients() {
        let sys = double_integrator(1.5);
        let asm = assemble_outer(&sys, 3).unwrap();
        let a = MultiIndex::new(vec![1, 1]);
        let j = asm.v_basis.iter().position(|b| *b == a).unwrap();
        let col: Vec<(usize, f64)> = asm.program.a.col(asm.v_start + j).collect();
        let coef = |blk: &MeasureBlock, e: &[u32]| {
            let (r, _) = blk.monomial_functional(&MultiIndex::new(e.to_vec()))[0];
            col.iter().find(|(rr, _)| *rr == r).map_or(0.0, |(_, v)| *v)
        };
        // L_f(x1 x2) = x2 (x2 + 0.1 x1^3) - 0.3 x1 (drift includes -0.3 from the box shift)
        assert_eq!(coef(&asm.mu, &[1, 1]), 1.5);
        assert_eq!(coef(&asm.mu, &[0, 2]), -1.0);
        assert!((coef(&asm.mu, &[3, 1]) + 0.1).abs() < 1e-15);
        assert!((coef(&asm.mu, &[1, 0]) - 0.3).abs() < 1e-15);
        assert_eq!(coef(&asm.mu_t1, &[1, 1]), 1.0);
        assert_eq!(coef(&asm.mu_t2, &[1, 1]), 1.0);
        // L_G(x1 x2) = 0.3 x1
        assert!((coef(&asm.sigma[0], &[1, 0]) + 0.3).abs() < 1e-15);
        // the ball moment of x1 x2 vanishes by symmetry
        assert_eq!(asm.program.c[asm.v_start + j], 0.0);
    }

    #[test]
    fn zero_input_bound_forces_zero_control_measure() {
        let sets = ProblemSets::new(
            SemialgebraicSet::boxed(&[-1.0], &[1.0]),
            SemialgebraicSet::boxed(&[-0.1], &[0.1]),
            0.0,
            1,
        )
        .unwrap();
        let sys = ControlSystem::new(vec![p(1, "-x1")], vec![vec![p(1, "1")]], sets, 1.0).unwrap();
        let res = solve_outer(&sys, 2, &SolverSettings::default()).unwrap();
        assert!(res.moments.sigma[0].values().iter().all(|v| v.abs() < 1e-6));
        assert!(res.moments.sigma_hat[0].values().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn one_dimensional_outer_covers_x() {
        let sys = one_d();
        let res = solve_outer(&sys, 4, &SolverSettings::default()).unwrap();
        assert!((res.objective - res.dual_objective).abs() <= 1e-5 * (1.0 + res.objective.abs()));
        for i in 1..200 {
            let x = -1.0 + 2.0 * i as f64 / 200.0;
            assert_eq!(outer_membership(&res, &[x]).unwrap(), Membership::Inside, "x={x}");
        }
        assert!(matches!(outer_membership(&res, &[1.5]), Err(OuterError::OutOfDomain(_))));
    }

    #[test]
    fn double_integrator_certificate_holds_on_target() {
        let sys = double_integrator(1.0);
        let res = solve_outer(&sys, 3, &SolverSettings::default()).unwrap();
        let pts = crate::semisets::sample(&sys.sets.target, 10_000, 11).unwrap();
        let worst = pts.iter().map(|x| res.certificate.v.eval(x)).fold(f64::INFINITY, f64::min);
        assert!(worst >= 1.0 - 1e-6, "min v on X_T = {worst}");
        assert_eq!(outer_membership(&res, &[0.0, 0.0]).unwrap(), Membership::Inside);
        assert!(res.report.checks.iter().all(|c| c.passed));
        let scale = 1.0 + res.objective.abs();
        assert!((res.objective - res.dual_objective).abs() <= 10.0 * 1e-8 * scale, "{} vs {} {:?}", res.objective, res.dual_objective, res.report);
    }
}
