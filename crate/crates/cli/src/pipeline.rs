//! The stages of the command-line pipeline: outer, extract, inner, verify
//! and grid.

use roa_core::extract::{closed_loop, matching_residuals, project_controller, raw_from_moments, ExtractError, ProjectionOptions, Provenance};
use roa_core::inner::{check_invariance, sample_inner, solve_inner, InnerError, InvarianceReport, InvarianceSpec};
use roa_core::outer::{solve_outer, OuterError, OuterResult};
use roa_core::polyalg::Polynomial;
use roa_core::semisets::{sample, MomentMethod, MonteCarloSpec, SetError};
use roa_core::verify::{
    certify_by_sampling, check_nonneg, estimate_volume, grid_points, reach_statistics, CertificateRef, CertificationReport, InequalityReport,
    ReachReport, SampleSpec, VerifyError, VolumeEstimate,
};
use serde::Serialize;
use thiserror::Error;

use crate::artifact::{check_chain, ArtifactError, ControllerArtifact, Hashed, InnerArtifact, OuterArtifact, StoredMoments};
use crate::problem::Problem;

/// Samples of the sampled feasibility checks.
pub const CHECK_SAMPLES: usize = 10_000;
/// Samples of the Monte Carlo volume estimates.
pub const VOLUME_SAMPLES: usize = 100_000;
/// Cells per axis of the level-set grids.
pub const GRID_CELLS: usize = 200;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Outer(#[from] OuterError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Inner(#[from] InnerError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Set(#[from] SetError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("{0}")]
    Refused(String),
}

fn strings(ps: &[Polynomial]) -> Vec<String> {
    ps.iter().map(|p| p.to_string()).collect()
}

pub fn outer_stage(p: &Problem) -> Result<(OuterArtifact, OuterResult), PipelineError> {
    let sys = p.system()?;
    let res = solve_outer(&sys, p.orders.k_outer, &p.solver.settings())?;
    let art = OuterArtifact {
        problem: p.name.clone(),
        problem_hash: p.source_hash.clone(),
        nvars: p.n,
        k: res.k,
        beta: res.beta,
        u_max: res.u_max,
        v: res.certificate.v.to_string(),
        p: strings(&res.certificate.p),
        objective: res.objective,
        dual_objective: res.dual_objective,
        mu: StoredMoments::from_moments(&res.moments.mu),
        sigma: res.moments.sigma.iter().map(StoredMoments::from_moments).collect(),
        report: res.report.clone(),
        hash: String::new(),
    }
    .seal();
    Ok((art, res))
}

pub fn extract_stage(p: &Problem, outer: &OuterArtifact, raw_only: bool) -> Result<ControllerArtifact, PipelineError> {
    if outer.problem_hash != p.source_hash {
        return Err(ArtifactError::Chain("outer certificate was computed for a different problem file".into()).into());
    }
    let sys = p.system()?;
    let mu = outer.mu.to_moments(p.n);
    let sigma: Vec<_> = outer.sigma.iter().map(|s| s.to_moments(p.n)).collect();
    let mut raw = raw_from_moments(&mu, &sigma, outer.k, p.orders.deg_u)?;
    raw.meta.u_max = outer.u_max;
    let raw_residual = matching_residuals(&mu, &sigma, outer.k, &raw)?;
    let ctrl = if raw_only {
        raw
    } else {
        let nu = p.x.lebesgue_moments(2 * outer.k, MonteCarloSpec::default())?;
        let opts = ProjectionOptions {
            budget: p.orders.deg_s,
            settings: p.solver.settings(),
            samples: SampleSpec {
                count: CHECK_SAMPLES,
                seed: p.verify.seed,
            },
            ..ProjectionOptions::default()
        };
        let mut c = project_controller(&raw, &nu.moments, &sys.sets, &opts)?;
        c.meta.nu = match nu.method {
            MomentMethod::Analytic => "uniform on X (analytic moments)".to_string(),
            MomentMethod::MonteCarlo { samples, seed } => format!("uniform on X (Monte Carlo, {samples} samples, seed {seed})"),
        };
        c
    };
    let residual = matching_residuals(&mu, &sigma, outer.k, &ctrl)?;
    let user = ctrl.to_user_box(&p.input);
    Ok(ControllerArtifact {
        problem_hash: p.source_hash.clone(),
        outer_hash: outer.hash.clone(),
        nvars: p.n,
        provenance: format!("{:?}", ctrl.provenance),
        degree: ctrl.degree,
        k: ctrl.meta.k,
        nu: ctrl.meta.nu.clone(),
        u_max: ctrl.meta.u_max,
        components: strings(&ctrl.components),
        user_components: strings(&user.components),
        raw_residual,
        residual,
        hash: String::new(),
    }
    .seal())
}

pub fn inner_stage(p: &Problem, ctrl: &ControllerArtifact) -> Result<InnerArtifact, PipelineError> {
    if ctrl.problem_hash != p.source_hash {
        return Err(ArtifactError::Chain("controller was computed for a different problem file".into()).into());
    }
    let c = ctrl.controller()?;
    if c.provenance == Provenance::Raw {
        return Err(PipelineError::Refused(
            "the controller is raw and its input bounds are not certified; run extract without --raw-only".into(),
        ));
    }
    let sys = p.system()?;
    let fbar = closed_loop(&sys, &c, false)?;
    let res = solve_inner(&fbar, &sys.sets, &p.beta_vec, p.orders.k_inner, &p.solver.settings())?;
    Ok(InnerArtifact {
        problem_hash: p.source_hash.clone(),
        outer_hash: ctrl.outer_hash.clone(),
        controller_hash: ctrl.hash.clone(),
        nvars: p.n,
        k: res.k,
        beta_vec: res.beta_vec.clone(),
        fbar: strings(&fbar),
        w: res.certificate.w.to_string(),
        v: strings(&res.certificate.v),
        objective: res.objective,
        dual_objective: res.dual_objective,
        report: res.report.clone(),
        hash: String::new(),
    }
    .seal())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Volumes {
    pub x: f64,
    pub outer: VolumeEstimate,
    pub inner: VolumeEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub problem: String,
    pub problem_hash: String,
    pub outer_hash: String,
    pub controller_hash: String,
    pub inner_hash: String,
    pub outer: CertificationReport,
    pub controller: Vec<InequalityReport>,
    pub inner: CertificationReport,
    pub invariance: InvarianceReport,
    pub reach: ReachReport,
    /// Inner-set samples that fall outside the outer set.
    pub containment_violations: usize,
    pub volumes: Volumes,
    pub passed: bool,
}

impl VerificationReport {
    pub fn failed_checks(&self) -> Vec<String> {
        self.outer
            .checks
            .iter()
            .chain(&self.controller)
            .chain(&self.inner.checks)
            .filter(|c| !c.passed)
            .map(|c| c.name.clone())
            .collect()
    }
}

pub fn verify_stage(p: &Problem, outer: &OuterArtifact, ctrl: &ControllerArtifact, inner: &InnerArtifact) -> Result<VerificationReport, PipelineError> {
    check_chain(&p.source_hash, outer, ctrl, inner)?;
    let sys = p.system()?;
    let ocert = outer.certificate()?;
    let icert = inner.certificate()?;
    let c = ctrl.controller()?;
    let fbar = inner.closed_loop()?;
    let v = &p.verify;
    let spec = SampleSpec {
        count: CHECK_SAMPLES,
        seed: v.seed,
    };
    let outer_rep = certify_by_sampling(CertificateRef::Outer { sys: &sys, cert: &ocert }, &spec)?;
    let inner_rep = certify_by_sampling(
        CertificateRef::Inner {
            fbar: &fbar,
            sets: &sys.sets,
            beta_vec: &inner.beta_vec,
            cert: &icert,
        },
        &spec,
    )?;
    let xs = sample(&sys.sets.x, CHECK_SAMPLES, v.seed ^ 0x5)?;
    let n = p.n;
    let mut bounds = Vec::new();
    for (i, u) in c.components.iter().enumerate() {
        bounds.push(check_nonneg(&format!("u_{} >= 0 on X", i + 1), u, &xs));
        let upper = Polynomial::constant(n, c.meta.u_max) - u.clone();
        bounds.push(check_nonneg(&format!("u_{} <= u_max on X", i + 1), &upper, &xs));
    }
    let invariance = check_invariance(
        &icert,
        &fbar,
        &sys.sets,
        &InvarianceSpec {
            samples: v.samples,
            seed: v.seed,
            dt: v.dt,
            t_max: v.t_max,
        },
    )?;
    let starts = sample_inner(&icert, &sys.sets, v.samples, v.seed.wrapping_add(1))?;
    let reach = reach_statistics(&fbar, &c, &sys.sets, &starts, v.dt, v.t_max)?;
    let vsum = icert.v_sum();
    let containment_violations = starts.iter().filter(|x| !(ocert.v.eval(x) > 0.0)).count();
    let volumes = Volumes {
        x: estimate_volume(|_| true, &p.x, VOLUME_SAMPLES, v.seed)?.volume,
        outer: estimate_volume(|x| ocert.v.eval(x) > 0.0, &p.x, VOLUME_SAMPLES, v.seed)?,
        inner: estimate_volume(|x| vsum.eval(x) < 0.0, &p.x, VOLUME_SAMPLES, v.seed)?,
    };
    let passed = outer_rep.passed && inner_rep.passed && bounds.iter().all(|b| b.passed);
    Ok(VerificationReport {
        problem: p.name.clone(),
        problem_hash: p.source_hash.clone(),
        outer_hash: outer.hash.clone(),
        controller_hash: ctrl.hash.clone(),
        inner_hash: inner.hash.clone(),
        outer: outer_rep,
        controller: bounds,
        inner: inner_rep,
        invariance,
        reach,
        containment_violations,
        volumes,
        passed,
    })
}

/// One level-set grid as CSV text.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFile {
    pub name: String,
    pub csv: String,
}

fn grid_csv(points: &[Vec<f64>], f: &Polynomial) -> String {
    let n = points.first().map_or(0, |x| x.len());
    let mut out: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    out.push("value".into());
    let mut s = out.join(",");
    s.push('\n');
    for x in points {
        for c in x {
            s.push_str(&format!("{c},"));
        }
        s.push_str(&format!("{}\n", f.eval(x)));
    }
    s
}

/// Grid points over the bounding box of X: the full grid for n <= 2 and the
/// three axis-normal slices through the box center for n = 3.
pub fn grid_layout(p: &Problem) -> Result<Vec<(String, Vec<Vec<f64>>)>, PipelineError> {
    let bb = p.x.bounding_box()?;
    match p.n {
        1 | 2 => Ok(vec![(String::new(), grid_points(&bb, GRID_CELLS))]),
        3 => {
            let mid = bb.center();
            Ok((0..3)
                .map(|fixed| {
                    let mut lo = bb.lo.clone();
                    let mut hi = bb.hi.clone();
                    lo.remove(fixed);
                    hi.remove(fixed);
                    let pts = grid_points(&roa_core::semisets::BoundingBox { lo, hi }, GRID_CELLS)
                        .into_iter()
                        .map(|mut x| {
                            x.insert(fixed, mid[fixed]);
                            x
                        })
                        .collect();
                    (format!("_x{}mid", fixed + 1), pts)
                })
                .collect())
        }
        n => Err(PipelineError::Refused(format!("level-set grids are only written for n <= 3, got n = {n}"))),
    }
}

/// Level sets of the outer `v` and of the inner `sum v_i`.
pub fn grid_stage(p: &Problem, outer: &OuterArtifact, inner: &InnerArtifact) -> Result<Vec<GridFile>, PipelineError> {
    let v = outer.certificate()?.v;
    let vsum = inner.certificate()?.v_sum();
    let mut files = Vec::new();
    for (suffix, pts) in grid_layout(p)? {
        files.push(GridFile {
            name: format!("grid_outer{suffix}.csv"),
            csv: grid_csv(&pts, &v),
        });
        files.push(GridFile {
            name: format!("grid_inner{suffix}.csv"),
            csv: grid_csv(&pts, &vsum),
        });
    }
    Ok(files)
}
