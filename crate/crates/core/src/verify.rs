//! Numerical checks independent of the relaxations: sampled certificate
//! checks, closed-loop simulation, Liouville residuals and volume estimates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::Controller;
use crate::inner::InnerCertificate;
use crate::outer::{ControlSystem, OuterCertificate};
use crate::polyalg::{monomial_basis, Polynomial};
use crate::semisets::{BoundingBox, ProblemSets, SemialgebraicSet, SetError};

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("state became non-finite at t = {0}")]
    NonFinite(f64),
    #[error("invalid time grid: dt = {dt}, horizon = {t_max}")]
    InvalidGrid { dt: f64, t_max: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Set(#[from] SetError),
}

/// Sample count and seed for sampled feasibility checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SampleSpec {
    pub count: usize,
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec { count: 10_000, seed: 1 }
    }
}

/// Relative tolerance of sampled inequality checks.
pub const SAMPLE_TOL: f64 = 1e-6;
/// Largest fraction of samples allowed beyond tolerance.
pub const MAX_VIOLATION_FRACTION: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub name: String,
    /// Smallest sampled value divided by the scale `1 + max |coefficient|`.
    pub worst: f64,
    pub violations: usize,
    pub samples: usize,
    pub passed: bool,
}

/// Checks `p >= -tol * scale` on the given points.
pub fn check_nonneg(name: &str, p: &Polynomial, points: &[Vec<f64>]) -> InequalityReport {
    let scale = 1.0 + p.max_abs_coeff();
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    for x in points {
        let v = p.eval(x) / scale;
        if !(v >= -SAMPLE_TOL) {
            violations += 1;
        }
        if v < worst || v.is_nan() {
            worst = v;
        }
    }
    let passed = (violations as f64) <= MAX_VIOLATION_FRACTION * points.len() as f64;
    InequalityReport {
        name: name.to_string(),
        worst,
        violations,
        samples: points.len(),
        passed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum ExitEvent {
    ReachedTarget(f64),
    LeftX(f64),
    Timeout(f64),
}

impl ExitEvent {
    pub fn label(&self) -> &'static str {
        match self {
            ExitEvent::ReachedTarget(_) => "ReachedTarget",
            ExitEvent::LeftX(_) => "LeftX",
            ExitEvent::Timeout(_) => "Timeout",
        }
    }

    pub fn time(&self) -> f64 {
        match *self {
            ExitEvent::ReachedTarget(t) | ExitEvent::LeftX(t) | ExitEvent::Timeout(t) => t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Inputs `u(x(t_j))`; empty unless filled by [`Trajectory::record_inputs`].
    pub inputs: Vec<Vec<f64>>,
    pub exit: ExitEvent,
    /// First entry into the target, also when the run continued past it.
    pub target_time: Option<f64>,
}

impl Trajectory {
    pub fn record_inputs(&mut self, u: &Controller) {
        self.inputs = self.states.iter().map(|x| u.evaluate(x)).collect();
    }

    /// `t,x1..xn[,u1..um],event` with a header line; the event is only
    /// filled on the last row.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.inputs.first().map_or(0, |u| u.len());
        let mut head = vec!["t".to_string()];
        head.extend((1..=n).map(|i| format!("x{i}")));
        head.extend((1..=m).map(|i| format!("u{i}")));
        head.push("event".to_string());
        let mut out = head.join(",");
        out.push('\n');
        for (j, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = vec![format!("{t}")];
            row.extend(x.iter().map(|v| format!("{v}")));
            if let Some(u) = self.inputs.get(j) {
                row.extend(u.iter().map(|v| format!("{v}")));
            }
            row.push(if j + 1 == self.times.len() { self.exit.label().to_string() } else { String::new() });
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn eval_field(f: &[Polynomial], x: &[f64]) -> Vec<f64> {
    f.iter().map(|p| p.eval(x)).collect()
}

pub fn rk4_step(f: &[Polynomial], x: &[f64], dt: f64) -> Vec<f64> {
    let axpy = |a: &[f64], s: f64, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + s * q).collect() };
    let k1 = eval_field(f, x);
    let k2 = eval_field(f, &axpy(x, 0.5 * dt, &k1));
    let k3 = eval_field(f, &axpy(x, 0.5 * dt, &k2));
    let k4 = eval_field(f, &axpy(x, dt, &k3));
    (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// `min_j g_j(x)`: positive in the interior of a set given by inequalities.
fn margin(set: &SemialgebraicSet, x: &[f64]) -> f64 {
    set.inequalities.iter().map(|g| g.eval(x)).fold(f64::INFINITY, f64::min)
}

/// Classical RK4 run stopped at the first event.
pub fn simulate(fbar: &[Polynomial], x0: &[f64], dt: f64, t_max: f64, sets: &ProblemSets) -> Result<Trajectory, VerifyError> {
    simulate_with(fbar, x0, dt, t_max, sets, true)
}

/// As [`simulate`]; with `stop_at_target = false` the run continues through
/// the target and only leaving X or the horizon end it.
pub fn simulate_with(fbar: &[Polynomial], x0: &[f64], dt: f64, t_max: f64, sets: &ProblemSets, stop_at_target: bool) -> Result<Trajectory, VerifyError> {
    if !(dt > 0.0 && t_max >= dt && t_max.is_finite()) {
        return Err(VerifyError::InvalidGrid { dt, t_max });
    }
    let n = sets.nvars();
    if x0.len() != n || fbar.len() != n {
        return Err(VerifyError::DimensionMismatch {
            expected: n,
            got: if x0.len() != n { x0.len() } else { fbar.len() },
        });
    }
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![x0.to_vec()],
        inputs: Vec::new(),
        exit: ExitEvent::Timeout(t_max),
        target_time: None,
    };
    let mut phi_t = margin(&sets.target, x0);
    let mut phi_x = margin(&sets.x, x0);
    if phi_x < 0.0 {
        traj.exit = ExitEvent::LeftX(0.0);
        return Ok(traj);
    }
    if phi_t > 0.0 {
        traj.target_time = Some(0.0);
        if stop_at_target {
            traj.exit = ExitEvent::ReachedTarget(0.0);
            return Ok(traj);
        }
    }
    let steps = (t_max / dt).ceil() as usize;
    let mut x = x0.to_vec();
    let mut t = 0.0;
    for j in 0..steps {
        let h = if j + 1 == steps { t_max - t } else { dt };
        let x1 = rk4_step(fbar, &x, h);
        if x1.iter().any(|v| !v.is_finite()) {
            return Err(VerifyError::NonFinite(t + h));
        }
        let pt1 = margin(&sets.target, &x1);
        let px1 = margin(&sets.x, &x1);
        let enter_t = (traj.target_time.is_none() && pt1 > 0.0 && phi_t <= 0.0).then(|| h * phi_t / (phi_t - pt1));
        let leave_x = (px1 < 0.0).then(|| h * phi_x / (phi_x - px1));
        if let Some(s) = enter_t {
            if leave_x.is_none_or(|l| s <= l) {
                traj.target_time = Some(t + s);
                if stop_at_target {
                    push_interp(&mut traj, &x, &x1, t, s, h);
                    traj.exit = ExitEvent::ReachedTarget(t + s);
                    return Ok(traj);
                }
            }
        }
        if let Some(s) = leave_x {
            push_interp(&mut traj, &x, &x1, t, s, h);
            traj.exit = ExitEvent::LeftX(t + s);
            return Ok(traj);
        }
        t = if j + 1 == steps { t_max } else { t + h };
        x = x1;
        phi_t = pt1;
        phi_x = px1;
        traj.times.push(t);
        traj.states.push(x.clone());
    }
    Ok(traj)
}

fn push_interp(traj: &mut Trajectory, x0: &[f64], x1: &[f64], t: f64, s: f64, h: f64) {
    let w = (s / h).clamp(0.0, 1.0);
    traj.times.push(t + s);
    traj.states.push(x0.iter().zip(x1).map(|(a, b)| a + w * (b - a)).collect());
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LiouvilleSpec {
    pub beta: f64,
    pub dt: f64,
    pub t_max: f64,
    pub test_degree: usize,
}

/// Signed empirical residuals of the discounted Liouville equation
/// `int v dmu_T + beta int v dmu - int v dmu_0 - int grad v . f dmu`
/// for every monomial `v` of degree at most `test_degree`, with `mu_0` the
/// empirical measure of `x0s`.
///
/// Time integrals use the trapezoid rule on the RK4 grid; runs that time out
/// contribute no terminal mass.
pub fn liouville_residuals(fbar: &[Polynomial], sets: &ProblemSets, x0s: &[Vec<f64>], spec: &LiouvilleSpec) -> Result<Vec<f64>, VerifyError> {
    let n = sets.nvars();
    let basis = monomial_basis(n, spec.test_degree);
    let tests: Vec<(Polynomial, Polynomial)> = basis
        .iter()
        .map(|a| {
            let v = Polynomial::monomial(a.clone(), 1.0);
            let lv = v.lie_derivative(fbar).expect("dimensions checked");
            (v, lv)
        })
        .collect();
    let per: Vec<Vec<f64>> = x0s
        .par_iter()
        .map(|x0| {
            let tr = simulate(fbar, x0, spec.dt, spec.t_max, sets)?;
            let mut acc = vec![0.0; tests.len()];
            for (k, (v, lv)) in tests.iter().enumerate() {
                let g = |j: usize| {
                    let e = (-spec.beta * tr.times[j]).exp();
                    e * (spec.beta * v.eval(&tr.states[j]) - lv.eval(&tr.states[j]))
                };
                let mut integral = 0.0;
                for j in 0..tr.times.len() - 1 {
                    integral += 0.5 * (tr.times[j + 1] - tr.times[j]) * (g(j) + g(j + 1));
                }
                let terminal = match tr.exit {
                    ExitEvent::Timeout(_) => 0.0,
                    ExitEvent::ReachedTarget(tau) | ExitEvent::LeftX(tau) => (-spec.beta * tau).exp() * v.eval(tr.states.last().expect("nonempty")),
                };
                acc[k] = terminal + integral - v.eval(x0);
            }
            Ok(acc)
        })
        .collect::<Result<_, VerifyError>>()?;
    let count = x0s.len().max(1) as f64;
    Ok((0..tests.len()).map(|k| per.iter().map(|r| r[k]).sum::<f64>() / count).collect())
}

/// Largest absolute Liouville residual; `mu_0` has unit mass so this is
/// also the residual relative to the initial mass.
pub fn liouville_residual(fbar: &[Polynomial], sets: &ProblemSets, x0s: &[Vec<f64>], spec: &LiouvilleSpec) -> Result<f64, VerifyError> {
    Ok(liouville_residuals(fbar, sets, x0s, spec)?.iter().fold(0.0, |a, r| a.max(r.abs())))
}

/// Richardson extrapolation `(4 r(dt/2) - r(dt)) / 3` of the second-order
/// residuals, reduced to the largest absolute entry.
pub fn liouville_residual_extrapolated(fbar: &[Polynomial], sets: &ProblemSets, x0s: &[Vec<f64>], spec: &LiouvilleSpec) -> Result<f64, VerifyError> {
    let coarse = liouville_residuals(fbar, sets, x0s, spec)?;
    let half = LiouvilleSpec { dt: spec.dt / 2.0, ..*spec };
    let fine = liouville_residuals(fbar, sets, x0s, &half)?;
    Ok(coarse
        .iter()
        .zip(&fine)
        .map(|(c, f)| ((4.0 * f - c) / 3.0).abs())
        .fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VolumeEstimate {
    pub volume: f64,
    pub stderr: f64,
    pub hits: usize,
    pub samples: usize,
}

/// Monte Carlo volume of `{x in region : indicator(x)}` from uniform samples
/// of the region's bounding box.
pub fn estimate_volume<F>(indicator: F, region: &SemialgebraicSet, samples: usize, seed: u64) -> Result<VolumeEstimate, VerifyError>
where
    F: Fn(&[f64]) -> bool + Sync,
{
    let bb = region.bounding_box()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = region.nvars();
    let pts: Vec<Vec<f64>> = (0..samples)
        .map(|_| (0..n).map(|j| rng.gen_range(bb.lo[j]..=bb.hi[j])).collect())
        .collect();
    let hits = pts
        .par_iter()
        .filter(|x| region.contains(x, 0.0) && indicator(x))
        .count();
    let p = hits as f64 / samples.max(1) as f64;
    let vb = bb.volume();
    Ok(VolumeEstimate {
        volume: vb * p,
        stderr: vb * (p * (1.0 - p) / samples.max(1) as f64).sqrt(),
        hits,
        samples,
    })
}

/// Cell midpoints of a regular grid over `bb` with `per_axis` cells per axis.
pub fn grid_points(bb: &BoundingBox, per_axis: usize) -> Vec<Vec<f64>> {
    let n = bb.lo.len();
    let total = per_axis.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|j| {
                    let i = idx % per_axis;
                    idx /= per_axis;
                    bb.lo[j] + (i as f64 + 0.5) * (bb.hi[j] - bb.lo[j]) / per_axis as f64
                })
                .collect()
        })
        .collect()
}

/// Grid estimate of the volume of `{x in region : indicator(x)}`.
pub fn grid_volume<F>(indicator: F, region: &SemialgebraicSet, per_axis: usize) -> Result<f64, VerifyError>
where
    F: Fn(&[f64]) -> bool + Sync,
{
    let bb = region.bounding_box()?;
    let cell = bb.volume() / per_axis.pow(region.nvars() as u32) as f64;
    let hits = grid_points(&bb, per_axis)
        .par_iter()
        .filter(|x| region.contains(x, 0.0) && indicator(x))
        .count();
    Ok(hits as f64 * cell)
}

/// Outcome of closed-loop runs from a batch of initial states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachReport {
    pub trajectories: usize,
    pub reached: usize,
    pub left_x: usize,
    pub timeouts: usize,
    /// Runs where `u(x(t))` left `[0, u_max]` at some step.
    pub input_violations: usize,
    /// Runs that reached the target with admissible inputs at every step.
    pub successes: usize,
}

impl ReachReport {
    pub fn success_rate(&self) -> f64 {
        if self.trajectories == 0 {
            return 1.0;
        }
        self.successes as f64 / self.trajectories as f64
    }
}

/// Simulates `x' = fbar(x)` from every start and checks the inputs of the
/// controller generating `fbar` along the way.
pub fn reach_statistics(
    fbar: &[Polynomial],
    u: &Controller,
    sets: &ProblemSets,
    starts: &[Vec<f64>],
    dt: f64,
    t_max: f64,
) -> Result<ReachReport, VerifyError> {
    let tol = SAMPLE_TOL * (1.0 + sets.u_max);
    let runs: Vec<(ExitEvent, bool)> = starts
        .par_iter()
        .map(|x0| {
            let tr = simulate(fbar, x0, dt, t_max, sets)?;
            let admissible = tr
                .states
                .iter()
                .all(|x| u.evaluate(x).iter().all(|&v| v >= -tol && v <= sets.u_max + tol));
            Ok((tr.exit, admissible))
        })
        .collect::<Result<_, VerifyError>>()?;
    let mut rep = ReachReport {
        trajectories: runs.len(),
        reached: 0,
        left_x: 0,
        timeouts: 0,
        input_violations: 0,
        successes: 0,
    };
    for (exit, admissible) in runs {
        match exit {
            ExitEvent::ReachedTarget(_) => rep.reached += 1,
            ExitEvent::LeftX(_) => rep.left_x += 1,
            ExitEvent::Timeout(_) => rep.timeouts += 1,
        }
        if !admissible {
            rep.input_violations += 1;
        }
        if admissible && matches!(exit, ExitEvent::ReachedTarget(_)) {
            rep.successes += 1;
        }
    }
    Ok(rep)
}

pub enum CertificateRef<'a> {
    Outer {
        sys: &'a ControlSystem,
        cert: &'a OuterCertificate,
    },
    Inner {
        fbar: &'a [Polynomial],
        sets: &'a ProblemSets,
        beta_vec: &'a [f64],
        cert: &'a InnerCertificate,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub checks: Vec<InequalityReport>,
    pub passed: bool,
}

/// Re-checks every certificate inequality on fresh samples of its support.
pub fn certify_by_sampling(cert: CertificateRef<'_>, spec: &SampleSpec) -> Result<CertificationReport, VerifyError> {
    let checks = match cert {
        CertificateRef::Outer { sys, cert } => {
            let xs = crate::semisets::sample(&sys.sets.x, spec.count, spec.seed)?;
            let ts = crate::semisets::sample(&sys.sets.target, spec.count, spec.seed ^ 0x7)?;
            crate::outer::outer_checks(sys, cert, &xs, &ts)
        }
        CertificateRef::Inner { fbar, sets, beta_vec, cert } => {
            let pts = crate::inner::InnerSamples::draw(sets, spec)?;
            crate::inner::inner_checks(fbar, beta_vec, cert, &pts)
        }
    };
    let passed = checks.iter().all(|c| c.passed);
    Ok(CertificationReport { checks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(n: usize, s: &str) -> Polynomial {
        Polynomial::parse(n, s).unwrap()
    }

    fn line_sets() -> ProblemSets {
        ProblemSets::new(
            SemialgebraicSet::boxed(&[-1.0], &[1.0]),
            SemialgebraicSet::boxed(&[-0.1], &[0.1]),
            1.0,
            1,
        )
        .unwrap()
    }

    #[test]
    fn linear_decay_hits_target_at_log_time() {
        // x' = -x from 0.5 reaches |x| < 0.1 at t = ln 5
        let tr = simulate(&[p(1, "-x1")], &[0.5], 1e-3, 10.0, &line_sets()).unwrap();
        match tr.exit {
            ExitEvent::ReachedTarget(t) => assert!((t - 5f64.ln()).abs() < 1e-5, "t = {t}"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn escape_and_timeout() {
        let sets = line_sets();
        let tr = simulate(&[p(1, "1")], &[0.5], 1e-2, 10.0, &sets).unwrap();
        match tr.exit {
            ExitEvent::LeftX(t) => assert!((t - 0.5).abs() < 1e-9),
            e => panic!("unexpected {e:?}"),
        }
        let tr = simulate(&[p(1, "0")], &[0.5], 0.3, 1.0, &sets).unwrap();
        assert_eq!(tr.exit, ExitEvent::Timeout(1.0));
        assert_eq!(*tr.times.last().unwrap(), 1.0);
        let tr = simulate(&[p(1, "0")], &[0.05], 0.1, 1.0, &sets).unwrap();
        assert_eq!(tr.exit, ExitEvent::ReachedTarget(0.0));
    }

    #[test]
    fn blow_up_is_reported() {
        let sets = ProblemSets::new(
            SemialgebraicSet::boxed(&[-1e300], &[1e300]),
            SemialgebraicSet::boxed(&[-0.1], &[0.1]),
            1.0,
            1,
        )
        .unwrap();
        let r = simulate(&[p(1, "x1^3")], &[2.0], 0.5, 10.0, &sets);
        assert!(matches!(r, Err(VerifyError::NonFinite(_))));
    }

    #[test]
    fn rk4_matches_exponential() {
        let x = rk4_step(&[p(1, "-x1")], &[1.0], 0.1);
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn liouville_residual_converges_at_second_order() {
        let sets = ProblemSets::new(
            SemialgebraicSet::ball(&[0.0, 0.0], 1.0),
            SemialgebraicSet::ball(&[0.0, 0.0], 0.1),
            1.0,
            1,
        )
        .unwrap();
        let fbar = [p(2, "-x1 + x2"), p(2, "-x1 - x2 + 0.3*x1^2")];
        let x0s = crate::semisets::sample(&sets.x, 40, 9).unwrap();
        let spec = LiouvilleSpec {
            beta: 1.0,
            dt: 0.02,
            t_max: 40.0,
            test_degree: 3,
        };
        let r1 = liouville_residual(&fbar, &sets, &x0s, &spec).unwrap();
        let r2 = liouville_residual(&fbar, &sets, &x0s, &LiouvilleSpec { dt: 0.01, ..spec }).unwrap();
        assert!(r2 <= r1 / 3.0, "{r1} -> {r2}");
        assert!(liouville_residual_extrapolated(&fbar, &sets, &x0s, &spec).unwrap() <= 1e-3);
    }

    #[test]
    fn volume_of_disc() {
        let disc = SemialgebraicSet::ball(&[0.0, 0.0], 1.0);
        let est = estimate_volume(|_| true, &disc, 200_000, 4).unwrap();
        assert!((est.volume - std::f64::consts::PI).abs() <= 4.0 * est.stderr);
        let half = estimate_volume(|x| x[0] > 0.0, &disc, 200_000, 4).unwrap();
        assert!((half.volume - std::f64::consts::FRAC_PI_2).abs() <= 4.0 * half.stderr);
        let g = grid_volume(|_| true, &disc, 400).unwrap();
        assert!((g - std::f64::consts::PI).abs() < 1e-2);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let tr = simulate(&[p(1, "-x1")], &[0.5], 0.5, 1.0, &line_sets()).unwrap();
        let csv = tr.to_csv();
        assert!(csv.starts_with("t,x1,event\n"));
        assert!(csv.trim_end().ends_with(tr.exit.label()));
        assert_eq!(csv.lines().count(), tr.times.len() + 1);
    }
}
