//! Polynomial controllers from the control measures of an outer solution.
//!
//! The raw controller matches `u_i dmu = dsigma_i` on the moments; the
//! projected controller is the closest polynomial in `L2(nu)` that provably
//! respects `0 <= u_i <= u_max` on X.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::conic::{self, ConicError, ProgramBuilder, SolverSettings, Status};
use crate::outer::{ControlSystem, InputBox, OuterResult};
use crate::polyalg::{count_up_to, monomial_basis, Polynomial};
use crate::semisets::{sample, ProblemSets, SetError};
use crate::sosmom::{compile_sos_constraint, moment_matrix, AffinePoly, GramConstraint, MomentError, MomentVector};
use crate::verify::{check_nonneg, SampleSpec};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("moment matrix of mu is numerically zero")]
    DegenerateMoments,
    #[error("controller degree {deg_u} exceeds relaxation order {k}")]
    DegreeTooHigh { deg_u: usize, k: usize },
    #[error("projection failed: {0}")]
    ProjectionInfeasible(String),
    #[error("raw controllers are not verified against the input bounds; pass force to use one anyway")]
    RawController,
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Set(#[from] SetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Provenance {
    Raw,
    Projected,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControllerMeta {
    pub k: usize,
    pub nu: String,
    pub u_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Controller {
    pub components: Vec<Polynomial>,
    pub degree: usize,
    pub provenance: Provenance,
    pub meta: ControllerMeta,
}

impl Controller {
    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|u| u.eval(x)).collect()
    }

    /// Maps canonical inputs in `[0, u_max]` to the user box.
    pub fn to_user_box(&self, input: &InputBox) -> Controller {
        let n = self.components.first().map_or(0, |p| p.nvars());
        let components = self
            .components
            .iter()
            .zip(input.scales())
            .zip(&input.lo)
            .map(|((u, s), &lo)| u.scale(s) + Polynomial::constant(n, lo))
            .collect();
        Controller {
            components,
            ..self.clone()
        }
    }
}

/// Raw controller from an outer solution.
pub fn extract_raw(res: &OuterResult, deg_u: usize) -> Result<Controller, ExtractError> {
    let mut c = raw_from_moments(&res.moments.mu, &res.moments.sigma, res.k, deg_u)?;
    c.meta.u_max = res.u_max;
    Ok(c)
}

/// Least-squares solution of `M_k(y_mu)[:, basis(deg_u)] u = y_sigma[basis(k)]`
/// by SVD truncated at `1e-9 * sigma_max`.
pub fn raw_from_moments(mu: &MomentVector, sigma: &[MomentVector], k: usize, deg_u: usize) -> Result<Controller, ExtractError> {
    if deg_u > k {
        return Err(ExtractError::DegreeTooHigh { deg_u, k });
    }
    let n = mu.nvars();
    let full = moment_matrix(mu, k)?;
    let cols = count_up_to(n, deg_u);
    let m = full.columns(0, cols).into_owned();
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 1e-12) {
        return Err(ExtractError::DegenerateMoments);
    }
    let rows = count_up_to(n, k);
    let basis = monomial_basis(n, deg_u);
    let u = svd.u.as_ref().expect("requested");
    let vt = svd.v_t.as_ref().expect("requested");
    let components = sigma
        .iter()
        .map(|s| {
            let rhs = DVector::from_column_slice(&s.values()[..rows]);
            let utb = u.transpose() * rhs;
            let mut coef = DVector::zeros(cols);
            for (i, &sv) in svd.singular_values.iter().enumerate() {
                if sv > 1e-9 * smax {
                    coef += vt.row(i).transpose() * (utb[i] / sv);
                }
            }
            Polynomial::from_coefficients(&basis, coef.as_slice())
        })
        .collect();
    Ok(Controller {
        components,
        degree: deg_u,
        provenance: Provenance::Raw,
        meta: ControllerMeta {
            k,
            nu: "mu".into(),
            u_max: f64::NAN,
        },
    })
}

/// `|| M u - y_sigma ||` for each channel, in the raw extraction's norm.
pub fn matching_residuals(mu: &MomentVector, sigma: &[MomentVector], k: usize, c: &Controller) -> Result<Vec<f64>, ExtractError> {
    let n = mu.nvars();
    let full = moment_matrix(mu, k)?;
    let cols = count_up_to(n, c.degree);
    let m = full.columns(0, cols);
    let basis = monomial_basis(n, c.degree);
    let rows = count_up_to(n, k);
    Ok(c.components
        .iter()
        .zip(sigma)
        .map(|(u, s)| {
            let coef = DVector::from_iterator(cols, basis.iter().map(|a| u.coeff(a)));
            let rhs = DVector::from_column_slice(&s.values()[..rows]);
            (m * coef - rhs).norm()
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct ProjectionOptions {
    /// Degree budget `deg(g_X s)`; defaults to `2 ceil(deg_u / 2)`, raised to
    /// cover the constraints of X.
    pub budget: Option<usize>,
    /// Weight of the optional `l1` penalty on the coefficients.
    pub l1: f64,
    pub settings: SolverSettings,
    pub samples: SampleSpec,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            budget: None,
            l1: 0.0,
            settings: SolverSettings::default(),
            samples: SampleSpec::default(),
        }
    }
}

/// Projects each channel of `raw` onto the polynomials of the same degree
/// that are certified to lie in `[0, u_max]` on X.
pub fn project_controller(raw: &Controller, nu: &MomentVector, sets: &ProblemSets, opts: &ProjectionOptions) -> Result<Controller, ExtractError> {
    let n = sets.nvars();
    let deg = raw.degree;
    let meta = ControllerMeta {
        k: raw.meta.k,
        nu: raw.meta.nu.clone(),
        u_max: sets.u_max,
    };
    if sets.u_max == 0.0 {
        return Ok(Controller {
            components: vec![Polynomial::zero(n); raw.components.len()],
            degree: deg,
            provenance: Provenance::Projected,
            meta,
        });
    }
    if nu.degree() < 2 * deg {
        return Err(MomentError::DegreeShortfall {
            needed: 2 * deg,
            available: nu.degree(),
        }
        .into());
    }
    let m1 = moment_matrix(nu, deg)?;
    let e = conic::sym_eigen(&m1);
    let r = DMatrix::from_diagonal(&e.values.map(|l| l.max(0.0).sqrt())) * e.vectors.transpose();
    let budget = opts.budget.unwrap_or(2 * deg.div_ceil(2)).max(2 * deg.div_ceil(2));
    let pts = sample(&sets.x, opts.samples.count, opts.samples.seed)?;
    let components = raw
        .components
        .par_iter()
        .map(|u| project_channel(u, deg, &r, sets, budget, opts, &pts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Controller {
        components,
        degree: deg,
        provenance: Provenance::Projected,
        meta,
    })
}

fn project_channel(
    raw: &Polynomial,
    deg: usize,
    r: &DMatrix<f64>,
    sets: &ProblemSets,
    budget: usize,
    opts: &ProjectionOptions,
    pts: &[Vec<f64>],
) -> Result<Polynomial, ExtractError> {
    let n = sets.nvars();
    let basis = monomial_basis(n, deg);
    let nb = basis.len();
    let uhat = DVector::from_iterator(nb, basis.iter().map(|a| raw.coeff(a)));
    let ruhat = r * &uhat;

    let mut b = ProgramBuilder::new();
    let u0 = b.add_free(nb);
    let z = b.add_psd(nb + 1);
    for i in 0..nb {
        for j in 0..=i {
            let row = b.add_rows(1);
            add_sym(&mut b, row, z, i, j);
            if i == j {
                b.set_rhs(row, 1.0);
            }
        }
        let row = b.add_rows(1);
        add_sym(&mut b, row, z, i, nb);
        for j in 0..nb {
            if r[(i, j)] != 0.0 {
                b.coef_free(row, u0 + j, -r[(i, j)]);
            }
        }
        b.set_rhs(row, -ruhat[i]);
    }
    b.cost_psd(z, nb, nb, 1.0);
    if opts.l1 > 0.0 {
        let s = b.add_nonneg(2 * nb);
        for j in 0..nb {
            let row = b.add_rows(1);
            b.coef_free(row, u0 + j, 1.0);
            b.coef_nonneg(row, s + j, -1.0);
            b.coef_nonneg(row, s + nb + j, 1.0);
            b.cost_nonneg(s + j, opts.l1);
            b.cost_nonneg(s + nb + j, opts.l1);
        }
    }
    let lin: Vec<(usize, Polynomial)> = basis
        .iter()
        .enumerate()
        .map(|(j, a)| (u0 + j, Polynomial::monomial(a.clone(), 1.0)))
        .collect();
    let lower = AffinePoly {
        constant: Polynomial::zero(n),
        linear: lin.clone(),
    };
    let upper = AffinePoly {
        constant: Polynomial::constant(n, sets.u_max),
        linear: lin.into_iter().map(|(j, p)| (j, -p)).collect(),
    };
    compile_sos_constraint(&mut b, &GramConstraint::on_set(lower, &sets.x, budget), budget)?;
    compile_sos_constraint(&mut b, &GramConstraint::on_set(upper, &sets.x, budget), budget)?;
    let prog = b.build()?;
    let sol = conic::solve(&prog, &opts.settings)?;
    let ok = match sol.status {
        Status::Optimal => true,
        Status::SlowProgress => {
            let rr = sol.residuals;
            rr.primal.max(rr.dual).max(rr.gap) <= crate::outer::SLOW_PROGRESS_RESIDUAL
        }
        _ => false,
    };
    if !ok {
        return Err(ExtractError::ProjectionInfeasible(format!(
            "solver status {:?} although u = u_max/2 is feasible",
            sol.status
        )));
    }
    let u = Polynomial::from_coefficients(&basis, &sol.primal[u0..u0 + nb]);
    let lo = check_nonneg("u >= 0 on X", &u, pts);
    let hi = check_nonneg("u <= u_max on X", &(Polynomial::constant(n, sets.u_max) - u.clone()), pts);
    for c in [lo, hi] {
        if c.violations > 0 {
            return Err(ExtractError::ProjectionInfeasible(format!(
                "{} violated at {} of {} samples (worst {:e})",
                c.name, c.violations, c.samples, c.worst
            )));
        }
    }
    Ok(u)
}

/// `X_{ij}` as a symmetric coefficient.
fn add_sym(b: &mut ProgramBuilder, row: usize, blk: conic::PsdBlock, i: usize, j: usize) {
    if i == j {
        b.coef_psd(row, blk, i, i, 1.0);
    } else {
        b.coef_psd(row, blk, i, j, 0.5);
        b.coef_psd(row, blk, j, i, 0.5);
    }
}

/// Closed-loop vector field `f + sum_i g_i u_i`.
pub fn closed_loop(sys: &ControlSystem, u: &Controller, force: bool) -> Result<Vec<Polynomial>, ExtractError> {
    if u.provenance == Provenance::Raw && !force {
        return Err(ExtractError::RawController);
    }
    let mut out = sys.f.clone();
    for (col, ui) in sys.g.iter().zip(&u.components) {
        for (fi, gi) in out.iter_mut().zip(col) {
            *fi = fi.clone() + gi.clone() * ui.clone();
        }
    }
    Ok(out)
}
