//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use roa_core::conic::{project_psd, smat, solve, ProgramBuilder, SolverSettings, Status};
use roa_core::extract::{
    closed_loop, extract_raw, matching_residuals, project_controller, raw_from_moments, Controller, ControllerMeta, ProjectionOptions, Provenance,
};
use roa_core::inner::{check_invariance, inner_membership, sample_inner, solve_inner, InnerResult, InvarianceSpec};
use roa_core::outer::{outer_membership, solve_outer, ControlSystem, InputBox, Membership, OuterResult};
use roa_core::polyalg::{monomial_basis, MultiIndex, Polynomial};
use roa_core::semisets::{lebesgue_moments_ball, lebesgue_moments_box, sample, ProblemSets, SemialgebraicSet};
use roa_core::sosmom::{localizing_matrix, moment_matrix, MomentVector};
use roa_core::verify::{liouville_residuals, reach_statistics, simulate_with, LiouvilleSpec};

const DT: f64 = 1e-2;
const HORIZON: f64 = 100.0;
/// Smallest inner coverage of the 1-D state interval accepted at order 6.
/// Frozen from a brute-force closed-loop sweep (every grid state reaches the
/// target) and the certified lower bound of about 0.965 at order 6.
const LINE_COVERAGE_THRESHOLD: f64 = 0.95;

fn p(n: usize, s: &str) -> Polynomial {
    Polynomial::parse(n, s).unwrap()
}

fn unit_box(m: usize) -> InputBox {
    InputBox {
        lo: vec![-1.0; m],
        hi: vec![1.0; m],
    }
}

fn double_integrator() -> ControlSystem {
    ControlSystem::with_input_box(
        vec![p(2, "x2 + 0.1*x1^3"), p(2, "0")],
        vec![vec![p(2, "0"), p(2, "0.3")]],
        SemialgebraicSet::ball(&[0.0, 0.0], 1.2),
        SemialgebraicSet::ball(&[0.0, 0.0], 0.1),
        &unit_box(1),
        1.0,
    )
    .unwrap()
}

fn van_der_pol() -> ControlSystem {
    ControlSystem::with_input_box(
        vec![p(3, "-2*x2"), p(3, "0.8*x1 - 2.1*x2 + x3 + 10*x1^2*x2"), p(3, "-x3 + x3^3")],
        vec![vec![p(3, "0"), p(3, "0"), p(3, "0.5")]],
        SemialgebraicSet::ball(&[0.0, 0.0, 0.0], 1.0),
        SemialgebraicSet::ball(&[0.0, 0.0, 0.0], 0.1),
        &unit_box(1),
        1.0,
    )
    .unwrap()
}

fn line() -> ControlSystem {
    ControlSystem::with_input_box(
        vec![p(1, "0")],
        vec![vec![p(1, "1")]],
        SemialgebraicSet::boxed(&[-1.0], &[1.0]),
        SemialgebraicSet::boxed(&[-0.1], &[0.1]),
        &unit_box(1),
        1.0,
    )
    .unwrap()
}

struct Run {
    sys: ControlSystem,
    outer: OuterResult,
    raw: Controller,
    ctrl: Controller,
    fbar: Vec<Polynomial>,
    inner: Vec<InnerResult>,
    seconds: f64,
}

fn pipeline(sys: ControlSystem, k_outer: usize, deg_u: usize, k_inner: &[usize], beta_vec: &[f64]) -> Run {
    let t = Instant::now();
    let settings = SolverSettings::default();
    let outer = solve_outer(&sys, k_outer, &settings).expect("outer relaxation");
    let raw = extract_raw(&outer, deg_u).expect("raw controller");
    let nu = sys.sets.x.lebesgue_moments(2 * k_outer, Default::default()).unwrap().moments;
    let ctrl = project_controller(&raw, &nu, &sys.sets, &ProjectionOptions::default()).expect("projection");
    let fbar = closed_loop(&sys, &ctrl, false).unwrap();
    let inner = k_inner
        .iter()
        .map(|&k| solve_inner(&fbar, &sys.sets, beta_vec, k, &settings).expect("inner relaxation"))
        .collect();
    Run {
        sys,
        outer,
        raw,
        ctrl,
        fbar,
        inner,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn di_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| pipeline(double_integrator(), 4, 4, &[4], &[10.0, 1.0, 0.1, 0.01, 0.001]))
}

fn vdp_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| pipeline(van_der_pol(), 3, 3, &[4], &[1.0, 0.1, 0.01, 0.001]))
}

/// Outer results of the double integrator at orders 2 and 3.
fn di_lower_orders() -> &'static [OuterResult] {
    static RES: OnceLock<Vec<OuterResult>> = OnceLock::new();
    RES.get_or_init(|| {
        let sys = &di_run().sys;
        [2, 3].iter().map(|&k| solve_outer(sys, k, &SolverSettings::default()).unwrap()).collect()
    })
}

fn line_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| pipeline(line(), 4, 3, &[3, 4, 5, 6], &[10.0, 1.0, 0.1, 0.01, 0.001]))
}

/// Result of one criterion: pass flag and a one-line summary of the numbers.
type Outcome = (bool, String);

/// Counts over the cell midpoints of a grid on the bounding box of X.
struct GridScan {
    cell: f64,
    in_x: usize,
    inner: usize,
    outside_outer: usize,
}

fn grid_scan(run: &Run, per_axis: usize) -> GridScan {
    let x_set = &run.sys.sets.x;
    let bb = x_set.bounding_box().unwrap();
    let n = bb.lo.len();
    let total = per_axis.pow(n as u32);
    let (in_x, inner, outside_outer) = (0..total)
        .into_par_iter()
        .map(|mut idx| {
            let x: Vec<f64> = (0..n)
                .map(|j| {
                    let i = idx % per_axis;
                    idx /= per_axis;
                    bb.lo[j] + (i as f64 + 0.5) * (bb.hi[j] - bb.lo[j]) / per_axis as f64
                })
                .collect();
            if !x_set.contains(&x, 0.0) {
                return (0, 0, 0);
            }
            let inside = inner_membership(&run.inner[0], &x).unwrap() == Membership::Inside;
            let out = outer_membership(&run.outer, &x).unwrap() == Membership::Outside;
            (1, inside as usize, (inside && out) as usize)
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    GridScan {
        cell: bb.volume() / total as f64,
        in_x,
        inner,
        outside_outer,
    }
}

fn pipeline_criterion(run: &Run, samples: usize, budget_minutes: f64) -> Outcome {
    let scan = grid_scan(run, 200);
    let vol_x = scan.in_x as f64 * scan.cell;
    let vol_inner = scan.inner as f64 * scan.cell;
    let starts = sample_inner(&run.inner[0].certificate, &run.sys.sets, samples, 11).unwrap();
    let reach = reach_statistics(&run.fbar, &run.ctrl, &run.sys.sets, &starts, DT, HORIZON).unwrap();
    let rate = reach.successes as f64 / samples as f64;
    let ok = run.seconds <= budget_minutes * 60.0
        && vol_inner >= 0.05 * vol_x
        && scan.outside_outer == 0
        && starts.len() == samples
        && rate >= 0.99;
    let msg = format!(
        "time {:.1} s, inner grid volume {:.4} of {:.4} ({:.1}%), inner cells outside outer {}, reach {}/{} (left X {}, timeouts {}, input violations {})",
        run.seconds,
        vol_inner,
        vol_x,
        100.0 * vol_inner / vol_x,
        scan.outside_outer,
        reach.successes,
        samples,
        reach.left_x,
        reach.timeouts,
        reach.input_violations
    );
    (ok, msg)
}

fn criterion_1() -> Outcome {
    pipeline_criterion(di_run(), 500, 30.0)
}

fn criterion_2() -> Outcome {
    pipeline_criterion(vdp_run(), 300, 60.0)
}

fn criterion_3() -> Outcome {
    let run = line_run();
    let covered = (0..=1980).all(|i| {
        let x = -0.99 + 1e-3 * i as f64;
        outer_membership(&run.outer, &[x]).unwrap() == Membership::Inside
    });
    let cells = 2000;
    let coverage: Vec<f64> = run
        .inner
        .iter()
        .map(|res| {
            let hits = (0..cells)
                .filter(|&i| {
                    let x = -1.0 + 2.0 * (i as f64 + 0.5) / cells as f64;
                    inner_membership(res, &[x]).unwrap() == Membership::Inside
                })
                .count();
            hits as f64 / cells as f64
        })
        .collect();
    let monotone = coverage.windows(2).all(|w| w[1] >= w[0]);
    let last = *coverage.last().unwrap();
    let ok = covered && monotone && last >= LINE_COVERAGE_THRESHOLD;
    (
        ok,
        format!("outer covers (-0.99, 0.99): {covered}, inner coverage k=3..6 {coverage:?}, threshold {LINE_COVERAGE_THRESHOLD}"),
    )
}

/// Largest step increase of `exp(-beta t) v(x(t))` over closed-loop runs.
struct Decay {
    trajectories: usize,
    skipped: usize,
    violations: usize,
    worst: f64,
}

fn decay(v: &Polynomial, beta: f64, run: &Run, stop_at_target: bool, seed: u64) -> Decay {
    let sets = &run.sys.sets;
    let starts = sample(&sets.x, 100, seed).unwrap();
    let tol = 1e-6 * (1.0 + sets.u_max);
    let mut d = Decay {
        trajectories: 0,
        skipped: 0,
        violations: 0,
        worst: f64::NEG_INFINITY,
    };
    for x0 in &starts {
        let tr = simulate_with(&run.fbar, x0, DT, HORIZON, sets, stop_at_target).unwrap();
        let admissible = tr
            .states
            .iter()
            .all(|x| run.ctrl.evaluate(x).iter().all(|&u| u >= -tol && u <= sets.u_max + tol));
        if !admissible {
            d.skipped += 1;
            continue;
        }
        d.trajectories += 1;
        let w: Vec<f64> = tr.times.iter().zip(&tr.states).map(|(t, x)| (-beta * t).exp() * v.eval(x)).collect();
        for s in w.windows(2) {
            let inc = s[1] - s[0];
            d.worst = d.worst.max(inc);
            if inc > 1e-4 {
                d.violations += 1;
            }
        }
    }
    d
}

fn criterion_4() -> Outcome {
    let mut certificates = 0;
    let mut runs = 0;
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut failing = Vec::new();
    let mut record = |name: String, d: Decay| {
        certificates += 1;
        runs += d.trajectories;
        violations += d.violations;
        worst = worst.max(d.worst);
        if d.violations > 0 || d.trajectories != 100 {
            failing.push(format!("{name}: {} violations, {} inadmissible runs", d.violations, d.skipped));
        }
    };
    let di = di_run();
    for (label, run) in [("double integrator", di), ("van der pol", vdp_run()), ("line", line_run())] {
        record(format!("{label} outer k={}", run.outer.k), decay(&run.outer.certificate.v, run.outer.beta, run, false, 21));
        for res in &run.inner {
            for (i, (v, &b)) in res.certificate.v.iter().zip(&res.beta_vec).enumerate() {
                record(format!("{label} inner k={} v{}", res.k, i + 1), decay(v, b, run, true, 22));
            }
        }
    }
    // lower orders, driven by the order-4 controller
    for res in di_lower_orders() {
        record(format!("double integrator outer k={}", res.k), decay(&res.certificate.v, res.beta, di, false, 23));
    }
    let ok = failing.is_empty();
    (
        ok,
        format!("{certificates} certificates, {runs} runs, {violations} step increases above 1e-4, largest increase {worst:.1e}; failures {failing:?}"),
    )
}

fn criterion_5() -> Outcome {
    let run = di_run();
    let x0s = sample(&run.sys.sets.x, 1000, 5).unwrap();
    let spec = |dt: f64| LiouvilleSpec {
        beta: 1.0,
        dt,
        t_max: HORIZON,
        test_degree: 4,
    };
    let coarse = liouville_residuals(&run.fbar, &run.sys.sets, &x0s, &spec(1e-2)).unwrap();
    let fine = liouville_residuals(&run.fbar, &run.sys.sets, &x0s, &spec(5e-3)).unwrap();
    let max_abs = |r: &[f64]| r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let (rc, rf) = (max_abs(&coarse), max_abs(&fine));
    let extrapolated = coarse.iter().zip(&fine).map(|(c, f)| ((4.0 * f - c) / 3.0).abs()).fold(0.0, f64::max);
    let ok = rc >= 3.0 * rf && extrapolated <= 1e-3;
    (
        ok,
        format!("residual {rc:.3e} at dt 1e-2, {rf:.3e} at dt 5e-3 (ratio {:.2}), extrapolated {extrapolated:.3e}", rc / rf),
    )
}

fn criterion_6() -> Outcome {
    let run = di_run();
    let spec = InvarianceSpec {
        samples: 500,
        seed: 3,
        dt: DT,
        t_max: HORIZON,
    };
    let rep = check_invariance(&run.inner[0].certificate, &run.fbar, &run.sys.sets, &spec).unwrap();
    let ok = rep.trajectories == 500 && rep.pre_target_exits == 0 && (!rep.target_inside || rep.full_horizon_exits == Some(0));
    (
        ok,
        format!(
            "{} runs, {} exits before the target, target closure inside: {}, full-horizon exits {:?}",
            rep.trajectories, rep.pre_target_exits, rep.target_inside, rep.full_horizon_exits
        ),
    )
}

fn criterion_7() -> Outcome {
    let tol = 1e-8;
    let settings = SolverSettings { tol, max_iter: 200 };
    let mut fails = Vec::new();

    let mut b = ProgramBuilder::new();
    let blk = b.add_psd(1);
    let r = b.add_rows(1);
    b.coef_psd(r, blk, 0, 0, 1.0);
    b.set_rhs(r, 1.0);
    b.cost_psd(blk, 0, 0, 1.0);
    let sol = solve(&b.build().unwrap(), &settings).unwrap();
    if !(sol.status == Status::Optimal && (sol.primal[0] - 1.0).abs() <= 1e-7 && (sol.primal_objective - 1.0).abs() <= 1e-7) {
        fails.push("x = 1".to_string());
    }

    let mut b = ProgramBuilder::new();
    let blk = b.add_psd(2);
    let r = b.add_rows(1);
    b.coef_psd(r, blk, 0, 0, 1.0);
    b.set_rhs(r, 1.0);
    b.cost_psd(blk, 0, 1, 1.0);
    b.cost_psd(blk, 1, 0, 1.0);
    if solve(&b.build().unwrap(), &settings).unwrap().status != Status::Unbounded {
        fails.push("unbounded".to_string());
    }

    let mut b = ProgramBuilder::new();
    let t = b.add_free(1);
    let blk = b.add_psd(2);
    let rows = b.add_rows(3);
    for (k, &(i, j, bij)) in [(0, 0, 1.0), (1, 0, 0.0), (1, 1, 2.0)].iter().enumerate() {
        b.coef_psd(rows + k, blk, i, j, 1.0);
        if i == j {
            b.coef_free(rows + k, t, -1.0);
        }
        b.set_rhs(rows + k, -bij);
    }
    b.cost_free(t, 1.0);
    let sol = solve(&b.build().unwrap(), &settings).unwrap();
    if !(sol.status == Status::Optimal && (sol.primal[t] - 2.0).abs() <= 1e-7) {
        fails.push("max eigenvalue".to_string());
    }

    let close = |a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64| (a - b).norm() <= tol;
    let d = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -2.0]);
    if !close(&project_psd(&d).unwrap(), &DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.0]), 1e-12) {
        fails.push("diag clamp".to_string());
    }
    let psd = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    if !close(&project_psd(&psd).unwrap(), &psd, 1e-10) {
        fails.push("psd fixed point".to_string());
    }
    let swap = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    if !close(&project_psd(&swap).unwrap(), &DMatrix::from_element(2, 2, 0.5), 1e-12) {
        fails.push("swap matrix".to_string());
    }

    let mut worst_gap = f64::NEG_INFINITY;
    for seed in 0..50 {
        let prog = common::random_sdp(seed).prog;
        let a = solve(&prog, &settings).unwrap();
        let again = solve(&prog, &settings).unwrap();
        let scale = 1.0 + a.primal_objective.abs() + a.dual_objective.abs();
        worst_gap = worst_gap.max((a.dual_objective - a.primal_objective) / scale);
        let mut psd_ok = true;
        let offs = prog.cone.psd_offsets();
        for (bi, &s) in prog.cone.psd.iter().enumerate() {
            let x = smat(&a.primal[offs[bi]..offs[bi] + s * (s + 1) / 2], s);
            let norm = x.norm();
            psd_ok &= nalgebra::SymmetricEigen::new(x).eigenvalues.min() >= -tol * (1.0 + norm);
        }
        let same = a.iterations == again.iterations
            && a.primal.iter().zip(&again.primal).all(|(x, y)| x.to_bits() == y.to_bits())
            && a.dual.iter().zip(&again.dual).all(|(x, y)| x.to_bits() == y.to_bits());
        let dual_ok = a.primal_objective >= a.dual_objective - 10.0 * tol * scale;
        if a.status != Status::Optimal || !dual_ok || !psd_ok || !same {
            fails.push(format!("random sdp {seed}"));
        }
    }
    (
        fails.is_empty(),
        format!("3 conic examples, 3 projection examples, 50 random sdps; worst relative dual excess {worst_gap:.1e}; failures {fails:?}"),
    )
}

/// Monte Carlo integral of `x^alpha` over the disk of radius `r` with its
/// standard error.
fn disk_monte_carlo(r: f64, alpha: &[u32], samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = 4.0 * r * r;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let x: f64 = rng.gen_range(-r..r);
        let y: f64 = rng.gen_range(-r..r);
        let v = if x * x + y * y <= r * r { area * x.powi(alpha[0] as i32) * y.powi(alpha[1] as i32) } else { 0.0 };
        s += v;
        s2 += v * v;
    }
    let n = samples as f64;
    let mean = s / n;
    (mean, ((s2 / n - mean * mean) / n).sqrt())
}

/// `int_0^1 int_0^{2 pi} (r cos t)^2 r dt dr` by Simpson in `r` and the
/// trapezoid rule in `t`, both exact for these integrands.
fn polar_second_moment() -> f64 {
    let nr = 10;
    let nt = 64;
    let mut total = 0.0;
    for i in 0..=nr {
        let r = i as f64 / nr as f64;
        let w = if i == 0 || i == nr { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 } / (3.0 * nr as f64);
        let inner: f64 = (0..nt)
            .map(|j| {
                let t = 2.0 * std::f64::consts::PI * j as f64 / nt as f64;
                (r * t.cos()).powi(2) * r
            })
            .sum::<f64>()
            * 2.0
            * std::f64::consts::PI
            / nt as f64;
        total += w * inner;
    }
    total
}

fn criterion_8() -> Outcome {
    let mut fails = Vec::new();
    let mi = |e: &[u32]| MultiIndex::new(e.to_vec());

    let sq = lebesgue_moments_box(&[-1.0, -1.0], &[1.0, 1.0], 2);
    for (alpha, want) in [([0, 0], 4.0), ([2, 0], 4.0 / 3.0), ([1, 0], 0.0)] {
        if (sq.get(&mi(&alpha)) - want).abs() > 1e-9 {
            fails.push(format!("box {alpha:?}"));
        }
    }

    let big = lebesgue_moments_ball(&[0.0, 0.0], 1.2, 2);
    let (mc, se) = disk_monte_carlo(1.2, &[0, 0], 10_000_000, 1);
    let area = big.get(&mi(&[0, 0]));
    if (area - std::f64::consts::PI * 1.44).abs() > 1e-9 || (area - mc).abs() > 3.0 * se {
        fails.push("ball area".into());
    }
    let unit = lebesgue_moments_ball(&[0.0, 0.0], 1.0, 4);
    let (mc, se) = disk_monte_carlo(1.0, &[2, 0], 10_000_000, 2);
    let m20 = unit.get(&mi(&[2, 0]));
    if (m20 - polar_second_moment()).abs() > 1e-9 || (m20 - mc).abs() > 3.0 * se {
        fails.push("ball second moment".into());
    }
    let shifted = lebesgue_moments_ball(&[0.3, -0.2], 0.7, 5);
    let odd_about_center = {
        // int (x - c)^alpha for odd alpha, expanded over the stored moments
        let c = [0.3, -0.2];
        monomial_basis(2, 5).iter().filter(|a| a.exponents().iter().any(|e| e % 2 == 1)).all(|a| {
            let mut q = Polynomial::constant(2, 1.0);
            for (j, &e) in a.exponents().iter().enumerate() {
                for _ in 0..e {
                    q = q * (Polynomial::var(2, j) - Polynomial::constant(2, c[j]));
                }
            }
            shifted.integrate(&q).unwrap().abs() <= 1e-9
        })
    };
    if !odd_about_center {
        fails.push("odd moments about the center".into());
    }

    let close = |m: &DMatrix<f64>, want: &[f64]| {
        let s = m.nrows();
        m.shape() == (s, s) && want.len() == s * s && (m - DMatrix::from_row_slice(s, s, want)).amax() <= 1e-12
    };
    let leb = lebesgue_moments_box(&[-1.0], &[1.0], 4);
    if !close(&moment_matrix(&leb, 1).unwrap(), &[2.0, 0.0, 0.0, 2.0 / 3.0]) {
        fails.push("lebesgue moment matrix".into());
    }
    let a = -0.4;
    let dirac = MomentVector::dirac(&[a], 4);
    let md = moment_matrix(&dirac, 1).unwrap();
    if !close(&md, &[1.0, a, a, a * a]) || md.determinant().abs() > 1e-12 {
        fails.push("dirac moment matrix".into());
    }
    if moment_matrix(&MomentVector::zeros(1, 2), 1).unwrap().amax() != 0.0 {
        fails.push("zero measure".into());
    }
    if localizing_matrix(&leb, &p(1, "1"), 2).unwrap() != moment_matrix(&leb, 2).unwrap() {
        fails.push("unit multiplier".into());
    }
    let g = p(1, "1 - x1^2");
    let scaled = (localizing_matrix(&dirac, &g, 2).unwrap() - md * g.eval(&[a])).amax();
    if scaled > 1e-12 {
        fails.push("dirac localizing".into());
    }
    if !close(&localizing_matrix(&leb, &g, 2).unwrap(), &[4.0 / 3.0, 0.0, 0.0, 4.0 / 15.0]) {
        fails.push("lebesgue localizing".into());
    }
    (fails.is_empty(), format!("box, ball, moment and localizing matrix examples; failures {fails:?}"))
}

fn criterion_9() -> Outcome {
    let mut fails = Vec::new();
    let mu = lebesgue_moments_ball(&[0.0, 0.0], 1.0, 6);
    let half = raw_from_moments(&mu, &[mu.scaled(0.5)], 3, 2).unwrap();
    if (half.components[0].clone() - Polynomial::constant(2, 0.5)).max_abs_coeff() > 1e-6 {
        fails.push("constant density".to_string());
    }
    let zero = raw_from_moments(&mu, &[MomentVector::zeros(2, 6)], 3, 2).unwrap();
    if zero.components[0].max_abs_coeff() > 1e-6 {
        fails.push("zero density".to_string());
    }
    let (lo, hi) = ([0.0, -1.0], [2.0, 0.5]);
    let wide = lebesgue_moments_box(&lo, &hi, 5);
    let sigma_vals = monomial_basis(2, 4).iter().map(|a| wide.get(&a.add(&MultiIndex::unit(2, 0)))).collect();
    let lin = raw_from_moments(&wide.truncate(4), &[MomentVector::new(2, 4, sigma_vals)], 2, 1).unwrap();
    if (lin.components[0].clone() - Polynomial::var(2, 0)).max_abs_coeff() > 1e-6 {
        fails.push("linear density".to_string());
    }

    let sets = ProblemSets::new(SemialgebraicSet::ball(&[0.0, 0.0], 1.0), SemialgebraicSet::ball(&[0.0, 0.0], 0.1), 1.0, 1).unwrap();
    let two = Controller {
        components: vec![Polynomial::constant(2, 2.0)],
        degree: 0,
        provenance: Provenance::Raw,
        meta: ControllerMeta {
            k: 2,
            nu: "lebesgue".into(),
            u_max: 1.0,
        },
    };
    let nu = lebesgue_moments_ball(&[0.0, 0.0], 1.0, 4);
    let clamped = project_controller(&two, &nu, &sets, &ProjectionOptions::default()).unwrap();
    if (clamped.components[0].clone() - Polynomial::constant(2, 1.0)).max_abs_coeff() > 1e-6 {
        fails.push("clamp".to_string());
    }

    let mut residuals = Vec::new();
    for (label, run) in [("double integrator", di_run()), ("van der pol", vdp_run()), ("line", line_run())] {
        let m = &run.outer.moments;
        let raw = matching_residuals(&m.mu, &m.sigma, run.outer.k, &run.raw).unwrap();
        let proj = matching_residuals(&m.mu, &m.sigma, run.outer.k, &run.ctrl).unwrap();
        if raw.iter().zip(&proj).any(|(r, q)| r > q) {
            fails.push(format!("{label} residual order"));
        }
        residuals.push(format!("{label} raw {:.2e} <= projected {:.2e}", raw[0], proj[0]));
    }
    (fails.is_empty(), format!("{}; failures {fails:?}", residuals.join(", ")))
}

fn criterion_10() -> Outcome {
    let di = di_run();
    let certs: Vec<&OuterResult> = di_lower_orders().iter().chain(std::iter::once(&di.outer)).collect();
    let x_set = &di.sys.sets.x;
    let bb = x_set.bounding_box().unwrap();
    let per_axis = 200;
    let cell = bb.volume() / (per_axis * per_axis) as f64;
    let mut volumes = vec![0.0; certs.len()];
    for i in 0..per_axis {
        for j in 0..per_axis {
            let x = [
                bb.lo[0] + (i as f64 + 0.5) * (bb.hi[0] - bb.lo[0]) / per_axis as f64,
                bb.lo[1] + (j as f64 + 0.5) * (bb.hi[1] - bb.lo[1]) / per_axis as f64,
            ];
            if !x_set.contains(&x, 0.0) {
                continue;
            }
            let mut inside = true;
            for (vol, res) in volumes.iter_mut().zip(&certs) {
                inside &= outer_membership(res, &x).unwrap() == Membership::Inside;
                if inside {
                    *vol += cell;
                }
            }
        }
    }
    let non_increasing = volumes.windows(2).all(|w| w[1] <= w[0]);
    let strict = volumes.windows(2).any(|w| w[1] < w[0]);
    (non_increasing && strict, format!("running intersection volumes for k = 2, 3, 4: {volumes:.4?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("double integrator pipeline", criterion_1),
        ("van der pol pipeline", criterion_2),
        ("one-dimensional oracle", criterion_3),
        ("certificate decay along trajectories", criterion_4),
        ("liouville residual", criterion_5),
        ("inner set invariance", criterion_6),
        ("solver suite", criterion_7),
        ("moment machinery", criterion_8),
        ("controller extraction", criterion_9),
        ("monotone outer tightening", criterion_10),
    ];
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, msg) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let text = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {text}"))
        });
        failed += !ok as usize;
        let verdict = if ok { "PASS" } else { "FAIL" };
        writeln!(out, "criterion {:>2} {name}: {verdict} ({msg}) [{:.1} s]", i + 1, t.elapsed().as_secs_f64()).unwrap();
        out.flush().unwrap();
    }
    if failed > 0 {
        writeln!(out, "{failed} acceptance criteria failed").unwrap();
        std::process::exit(1);
    }
}
