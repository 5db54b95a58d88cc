//! Inner approximation of the region of attraction of a closed-loop system.
//!
//! The relaxation bounds the complement of the region of attraction from the
//! outside: `mu_0` collects initial states that leave X or never reach the
//! target. One occupation measure `mu^i` and one exit measure `mu_T^i` per
//! discount factor share the common initial measure. The primal side gives
//! `w` and `v_1..v_{n_beta}`, and the inner set is `{sum_i v_i < 0}`.

use serde::Serialize;
use thiserror::Error;

use crate::conic::{self, ConicError, ConicProgram, ProgramBuilder, SolverSettings, Status};
use crate::outer::{Membership, SolveReport, MARGINS, SLOW_PROGRESS_RESIDUAL};
use crate::polyalg::{monomial_basis, MultiIndex, Polynomial};
use crate::semisets::{boundary_pieces, sample, MonteCarloSpec, ProblemSets, SemialgebraicSet, SetError};
use crate::sosmom::{compile_measure_block, MeasureBlock, MomentError, MomentVector};
use crate::verify::{check_nonneg, simulate_with, ExitEvent, InequalityReport, SampleSpec, VerifyError};

#[derive(Debug, Error)]
pub enum InnerError {
    #[error("discount factors must be positive and distinct, got {0:?}")]
    InvalidBeta(Vec<f64>),
    #[error("closed-loop field has {got} components, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Degree(#[from] MomentError),
    #[error(transparent)]
    Set(#[from] SetError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
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

/// The inner program and the handles needed to decode its solution.
#[derive(Clone, Debug)]
pub struct InnerProgram {
    pub k: usize,
    pub beta_vec: Vec<f64>,
    pub program: ConicProgram,
    pub builder: ProgramBuilder,
    /// One block per piece of the target complement.
    pub mu0: Vec<MeasureBlock>,
    pub mu0_hat: Vec<MeasureBlock>,
    /// `mu[i][piece]` for discount factor `i`.
    pub mu: Vec<Vec<MeasureBlock>>,
    /// `mu_t[i][piece]` over the boundary pieces of X.
    pub mu_t: Vec<Vec<MeasureBlock>>,
    pub v_basis: Vec<MultiIndex>,
    pub v_start: Vec<usize>,
    pub w_basis: Vec<MultiIndex>,
    pub w_start: usize,
}

impl InnerProgram {
    fn mass_rows(&self) -> Vec<usize> {
        self.mu0
            .iter()
            .chain(&self.mu0_hat)
            .chain(self.mu.iter().flatten())
            .chain(self.mu_t.iter().flatten())
            .map(|m| m.mass_row())
            .collect()
    }

    pub fn decode(&self, x: &[f64]) -> InnerCertificate {
        let v = self
            .v_start
            .iter()
            .map(|&s| Polynomial::from_coefficients(&self.v_basis, &x[s..s + self.v_basis.len()]))
            .collect();
        let w = Polynomial::from_coefficients(&self.w_basis, &x[self.w_start..self.w_start + self.w_basis.len()]);
        InnerCertificate { w, v }
    }
}

fn check_inputs(fbar: &[Polynomial], sets: &ProblemSets, beta_vec: &[f64]) -> Result<(), InnerError> {
    let n = sets.nvars();
    if fbar.len() != n || fbar.iter().any(|p| p.nvars() != n) {
        return Err(InnerError::DimensionMismatch {
            expected: n,
            got: fbar.len(),
        });
    }
    let distinct = beta_vec.iter().enumerate().all(|(i, a)| beta_vec[..i].iter().all(|b| a != b));
    if beta_vec.is_empty() || !distinct || beta_vec.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
        return Err(InnerError::InvalidBeta(beta_vec.to_vec()));
    }
    Ok(())
}

/// Lebesgue moments of `closure(X) \ X_T` as the difference of the moments of
/// X and of the target.
pub fn complement_moments(sets: &ProblemSets, d: usize) -> Result<MomentVector, SetError> {
    let mx = sets.x.lebesgue_moments(d, MonteCarloSpec::default())?.moments;
    let mt = sets.target.lebesgue_moments(d, MonteCarloSpec::default())?.moments;
    let vals = mx.values().iter().zip(mt.values()).map(|(a, b)| a - b).collect();
    Ok(MomentVector::new(sets.nvars(), d, vals))
}

pub fn assemble_inner(fbar: &[Polynomial], sets: &ProblemSets, beta_vec: &[f64], k: usize) -> Result<InnerProgram, InnerError> {
    check_inputs(fbar, sets, beta_vec)?;
    let d = 2 * k;
    let need = fbar
        .iter()
        .map(|p| p.degree())
        .chain([sets.x.max_degree(), sets.target.max_degree()])
        .max()
        .unwrap_or(0);
    if d < need {
        return Err(MomentError::DegreeShortfall { needed: need, available: d }.into());
    }
    let n = sets.nvars();
    let comp = sets.complement_pieces();
    let bnd = boundary_pieces(&sets.x);
    let mut b = ProgramBuilder::new();
    let blocks = |b: &mut ProgramBuilder, pieces: &[SemialgebraicSet]| -> Result<Vec<MeasureBlock>, MomentError> {
        pieces.iter().map(|p| compile_measure_block(b, p, d)).collect()
    };
    let mu0 = blocks(&mut b, &comp)?;
    let mu0_hat = blocks(&mut b, &comp)?;
    let mut mu = Vec::new();
    let mut mu_t = Vec::new();
    for _ in beta_vec {
        mu.push(blocks(&mut b, &comp)?);
        mu_t.push(blocks(&mut b, &bnd)?);
    }
    for m in &mu0 {
        b.add_rhs(m.mass_row(), 1.0);
    }

    let v_basis: Vec<MultiIndex> = monomial_basis(n, d)
        .into_iter()
        .filter(|a| {
            Polynomial::monomial(a.clone(), 1.0)
                .lie_derivative(fbar)
                .expect("dimensions checked")
                .degree()
                <= d
        })
        .collect();
    let mut v_start = Vec::new();
    for (i, &beta) in beta_vec.iter().enumerate() {
        let start = b.add_free(v_basis.len());
        for (j, a) in v_basis.iter().enumerate() {
            let col = start + j;
            let xa = Polynomial::monomial(a.clone(), 1.0);
            let lf = xa.lie_derivative(fbar).expect("dimensions checked");
            let decay = xa.scale(beta) - lf;
            for blk in &mu[i] {
                for (r, v) in blk.functional(&decay) {
                    b.coef_free(r, col, v);
                }
            }
            for blk in &mu_t[i] {
                for (r, v) in blk.functional(&xa) {
                    b.coef_free(r, col, v);
                }
            }
            for blk in &mu0 {
                for (r, v) in blk.functional(&xa) {
                    b.coef_free(r, col, -v);
                }
            }
        }
        v_start.push(start);
    }

    let leb = complement_moments(sets, d)?;
    let w_basis = monomial_basis(n, d);
    let w_start = b.add_free(w_basis.len());
    for (j, a) in w_basis.iter().enumerate() {
        let xa = Polynomial::monomial(a.clone(), 1.0);
        for blk in mu0.iter().chain(&mu0_hat) {
            for (r, v) in blk.functional(&xa) {
                b.coef_free(r, w_start + j, v);
            }
        }
        b.cost_free(w_start + j, leb.get(a));
    }

    let program = b.build()?;
    Ok(InnerProgram {
        k,
        beta_vec: beta_vec.to_vec(),
        program,
        builder: b,
        mu0,
        mu0_hat,
        mu,
        mu_t,
        v_basis,
        v_start,
        w_basis,
        w_start,
    })
}

#[derive(Clone, Debug)]
pub struct InnerCertificate {
    pub w: Polynomial,
    pub v: Vec<Polynomial>,
}

impl InnerCertificate {
    pub fn v_sum(&self) -> Polynomial {
        let n = self.w.nvars();
        self.v.iter().fold(Polynomial::zero(n), |acc, v| acc + v.clone())
    }
}

/// Moments of each measure, one entry per support piece.
#[derive(Clone, Debug, Serialize)]
pub struct InnerMoments {
    pub mu0: Vec<MomentVector>,
    pub mu0_hat: Vec<MomentVector>,
    pub mu: Vec<Vec<MomentVector>>,
    pub mu_t: Vec<Vec<MomentVector>>,
}

#[derive(Clone, Debug)]
pub struct InnerResult {
    pub k: usize,
    pub beta_vec: Vec<f64>,
    pub certificate: InnerCertificate,
    pub moments: InnerMoments,
    /// `mass(mu_0)`, an estimate of the volume of the complement.
    pub objective: f64,
    /// `integral of w over the target complement`.
    pub dual_objective: f64,
    pub domain: SemialgebraicSet,
    pub report: SolveReport,
}

/// Sample points of every support used by the inner checks.
pub struct InnerSamples {
    pub complement: Vec<Vec<f64>>,
    pub boundary: Vec<Vec<f64>>,
}

impl InnerSamples {
    pub fn draw(sets: &ProblemSets, spec: &SampleSpec) -> Result<Self, SetError> {
        let mut complement = Vec::new();
        for (i, piece) in sets.complement_pieces().iter().enumerate() {
            complement.extend(sample(piece, spec.count, spec.seed.wrapping_add(i as u64))?);
        }
        let mut boundary = Vec::new();
        for (i, piece) in boundary_pieces(&sets.x).iter().enumerate() {
            boundary.extend(sample(piece, spec.count, spec.seed.wrapping_add(1000 + i as u64))?);
        }
        Ok(InnerSamples { complement, boundary })
    }
}

pub fn inner_checks(fbar: &[Polynomial], beta_vec: &[f64], cert: &InnerCertificate, pts: &InnerSamples) -> Vec<InequalityReport> {
    let n = cert.w.nvars();
    let mut out = Vec::new();
    for (i, (v, beta)) in cert.v.iter().zip(beta_vec).enumerate() {
        let lf = v.lie_derivative(fbar).expect("dimensions checked");
        out.push(check_nonneg(
            &format!("beta_{0} v_{0} - grad v_{0} . f >= 0 off target", i + 1),
            &(v.scale(*beta) - lf),
            &pts.complement,
        ));
    }
    let gap = cert.w.clone() - cert.v_sum() - Polynomial::constant(n, 1.0);
    out.push(check_nonneg("w - 1 - sum v >= 0 off target", &gap, &pts.complement));
    out.push(check_nonneg("w >= 0 off target", &cert.w, &pts.complement));
    for (i, v) in cert.v.iter().enumerate() {
        out.push(check_nonneg(&format!("v_{} >= 0 on the boundary of X", i + 1), v, &pts.boundary));
    }
    out
}

pub fn solve_inner(fbar: &[Polynomial], sets: &ProblemSets, beta_vec: &[f64], k: usize, settings: &SolverSettings) -> Result<InnerResult, InnerError> {
    solve_inner_with(fbar, sets, beta_vec, k, settings, &SampleSpec::default())
}

pub fn solve_inner_with(
    fbar: &[Polynomial],
    sets: &ProblemSets,
    beta_vec: &[f64],
    k: usize,
    settings: &SolverSettings,
    samples: &SampleSpec,
) -> Result<InnerResult, InnerError> {
    let asm = assemble_inner(fbar, sets, beta_vec, k)?;
    let pts = InnerSamples::draw(sets, samples)?;
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
            last_err = Some(InnerError::Solver {
                status: sol.status,
                residuals: sol.residuals,
            });
            continue;
        }
        let cert = asm.decode(&sol.primal);
        let checks = inner_checks(fbar, beta_vec, &cert, &pts);
        if let Some(bad) = checks.iter().find(|c| !c.passed) {
            last_err = Some(InnerError::CertificateRejected {
                name: bad.name.clone(),
                violations: bad.violations,
                samples: bad.samples,
                worst: bad.worst,
            });
            continue;
        }
        let dec = |bs: &[MeasureBlock]| bs.iter().map(|m| m.decode(&sol.dual)).collect::<Vec<_>>();
        let moments = InnerMoments {
            mu0: dec(&asm.mu0),
            mu0_hat: dec(&asm.mu0_hat),
            mu: asm.mu.iter().map(|p| dec(p)).collect(),
            mu_t: asm.mu_t.iter().map(|p| dec(p)).collect(),
        };
        let objective = moments.mu0.iter().map(|m| m.mass()).sum();
        return Ok(InnerResult {
            k,
            beta_vec: beta_vec.to_vec(),
            certificate: cert,
            moments,
            objective,
            dual_objective: sol.primal_objective,
            domain: sets.x.clone(),
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

/// Membership in `{x in X : sum_i v_i(x) < 0}`.
pub fn inner_membership(res: &InnerResult, x: &[f64]) -> Result<Membership, InnerError> {
    if x.len() != res.domain.nvars() || !res.domain.contains(x, 1e-12) {
        return Err(InnerError::OutOfDomain(x.to_vec()));
    }
    let s: f64 = res.certificate.v.iter().map(|v| v.eval(x)).sum();
    Ok(if s < 0.0 { Membership::Inside } else { Membership::Outside })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvarianceSpec {
    pub samples: usize,
    pub seed: u64,
    pub dt: f64,
    pub t_max: f64,
}

impl Default for InvarianceSpec {
    fn default() -> Self {
        InvarianceSpec {
            samples: 500,
            seed: 3,
            dt: 1e-2,
            t_max: 50.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvarianceReport {
    /// No sample of X fell in the inner set; every claim below is vacuous.
    pub empty_inner: bool,
    pub trajectories: usize,
    pub reached_target: usize,
    pub left_x: usize,
    pub timeouts: usize,
    /// Trajectories leaving the inner set before first reaching the target.
    pub pre_target_exits: usize,
    /// Whether every sample of the target closure lies in the inner set.
    pub target_inside: bool,
    /// Exits from the inner set over the whole horizon; only computed when
    /// `target_inside` holds.
    pub full_horizon_exits: Option<usize>,
}

/// Simulates the closed loop from points of the inner set and checks that
/// each trajectory stays in the set until it first reaches the target.
pub fn check_invariance(cert: &InnerCertificate, fbar: &[Polynomial], sets: &ProblemSets, spec: &InvarianceSpec) -> Result<InvarianceReport, InnerError> {
    let vsum = cert.v_sum();
    let tol = 1e-9 * (1.0 + vsum.max_abs_coeff());
    let starts = sample_inner(cert, sets, spec.samples, spec.seed)?;
    let target_pts = {
        let mut pts = sample(&sets.target, 2000, spec.seed ^ 0x11)?;
        for piece in boundary_pieces(&sets.target) {
            pts.extend(sample(&piece, 2000, spec.seed ^ 0x13)?);
        }
        pts
    };
    let target_inside = target_pts.iter().all(|x| vsum.eval(x) < 0.0);
    let mut rep = InvarianceReport {
        empty_inner: starts.is_empty(),
        trajectories: starts.len(),
        reached_target: 0,
        left_x: 0,
        timeouts: 0,
        pre_target_exits: 0,
        target_inside,
        full_horizon_exits: target_inside.then_some(0),
    };
    for x0 in &starts {
        let tr = simulate_with(fbar, x0, spec.dt, spec.t_max, sets, !target_inside)?;
        let tau = tr.target_time.unwrap_or(f64::INFINITY);
        match (tr.exit, tr.target_time) {
            (_, Some(_)) | (ExitEvent::ReachedTarget(_), _) => rep.reached_target += 1,
            (ExitEvent::LeftX(_), None) => rep.left_x += 1,
            _ => rep.timeouts += 1,
        }
        let exits = |upto: f64| {
            tr.times
                .iter()
                .zip(&tr.states)
                .any(|(t, x)| *t < upto && vsum.eval(x) >= tol)
        };
        if exits(tau) {
            rep.pre_target_exits += 1;
        }
        if let Some(c) = rep.full_horizon_exits.as_mut() {
            if exits(f64::INFINITY) || matches!(tr.exit, ExitEvent::LeftX(_)) {
                *c += 1;
            }
        }
    }
    Ok(rep)
}

/// Up to `count` points of the inner set, drawn from uniform samples of X.
pub fn sample_inner(cert: &InnerCertificate, sets: &ProblemSets, count: usize, seed: u64) -> Result<Vec<Vec<f64>>, InnerError> {
    let vsum = cert.v_sum();
    let mut out = Vec::new();
    let mut round = 0u64;
    while out.len() < count && round < 20 {
        let pts = sample(&sets.x, 10 * count.max(100), seed.wrapping_add(round))?;
        out.extend(pts.into_iter().filter(|x| vsum.eval(x) < 0.0));
        round += 1;
    }
    out.truncate(count);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(n: usize, s: &str) -> Polynomial {
        Polynomial::parse(n, s).unwrap()
    }

    fn line() -> ProblemSets {
        ProblemSets::new(
            SemialgebraicSet::boxed(&[-1.0], &[1.0]),
            SemialgebraicSet::boxed(&[-0.1], &[0.1]),
            1.0,
            1,
        )
        .unwrap()
    }

    #[test]
    fn duplicate_beta_rejected() {
        let r = assemble_inner(&[p(1, "-x1")], &line(), &[1.0, 1.0], 2);
        assert!(matches!(r, Err(InnerError::InvalidBeta(_))));
        let r = assemble_inner(&[p(1, "-x1")], &line(), &[0.0], 2);
        assert!(matches!(r, Err(InnerError::InvalidBeta(_))));
    }

    #[test]
    fn degree_shortfall() {
        let r = assemble_inner(&[p(1, "-x1^5")], &line(), &[1.0], 2);
        assert!(matches!(r, Err(InnerError::Degree(MomentError::DegreeShortfall { needed: 5, available: 4 }))));
    }

    #[test]
    fn piece_structure() {
        let asm = assemble_inner(&[p(1, "-x1")], &line(), &[1.0, 0.1], 2).unwrap();
        // the box target gives two complement pieces; the box X two boundary points
        assert_eq!(asm.mu0.len(), 2);
        assert_eq!(asm.mu.len(), 2);
        assert_eq!(asm.mu_t[0].len(), 2);
        assert_eq!(asm.v_start.len(), 2);
    }

    #[test]
    fn stable_line_inner_set() {
        let fbar = [p(1, "-x1")];
        let sets = line();
        let res = solve_inner(&fbar, &sets, &[1.0, 0.1], 4, &SolverSettings::default()).unwrap();
        assert!(res.objective <= 1.8 + 1e-6);
        assert!(res.report.checks.iter().all(|c| c.passed));
        assert_eq!(inner_membership(&res, &[1.0]).unwrap(), Membership::Outside);
        assert_eq!(inner_membership(&res, &[-1.0]).unwrap(), Membership::Outside);
        assert!(matches!(inner_membership(&res, &[1.2]), Err(InnerError::OutOfDomain(_))));
        let inside = (1..100)
            .map(|i| -1.0 + 2.0 * i as f64 / 100.0)
            .filter(|x| inner_membership(&res, &[*x]).unwrap() == Membership::Inside)
            .count();
        assert!(inside > 50, "only {inside} of 99 grid points inside");
        let rep = check_invariance(
            &res.certificate,
            &fbar,
            &sets,
            &InvarianceSpec {
                samples: 50,
                ..InvarianceSpec::default()
            },
        )
        .unwrap();
        assert!(!rep.empty_inner);
        assert_eq!(rep.pre_target_exits, 0);
        assert_eq!(rep.reached_target, rep.trajectories);
    }

    #[test]
    fn unstable_line_certificate_is_nonnegative_off_target() {
        // x' = x leaves X from every point off the target, so the optimum is
        // v = 0 there and sum v can only sit at solver noise
        let fbar = [p(1, "x1")];
        let sets = line();
        let res = solve_inner(&fbar, &sets, &[1.0], 3, &SolverSettings::default()).unwrap();
        let vsum = res.certificate.v_sum();
        let tol = 1e-6 * (1.0 + vsum.max_abs_coeff());
        for i in 0..=90 {
            let x = 0.1 + 0.01 * i as f64;
            assert!(vsum.eval(&[x]) >= -tol && vsum.eval(&[-x]) >= -tol, "x = {x}");
        }
        assert!(res.objective >= 1.8 - 1e-4, "complement mass {}", res.objective);
    }
}
