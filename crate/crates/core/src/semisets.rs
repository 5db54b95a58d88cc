//! Basic semialgebraic sets, their piecewise decompositions and the Lebesgue
//! moments used as right-hand sides of the relaxations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polyalg::{binomial, monomial_basis, MultiIndex, Polynomial};
use crate::sosmom::MomentVector;

/// Maximum number of rejection-sampling proposals before giving up.
pub const MAX_PROPOSALS: usize = 10_000_000;
/// Minimum acceptance rate below which a set is reported as empty or thin.
pub const MIN_ACCEPTANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetError {
    #[error("set is empty or has measure zero (accepted {accepted} of {proposals} proposals)")]
    EmptyOrThin { accepted: usize, proposals: usize },
    #[error("no bounding box can be derived; add a ball or box inequality")]
    Unbounded,
    #[error("target set is not contained in X (sample {0:?} violates X)")]
    TargetNotInside(Vec<f64>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// `{x : g_i(x) >= 0 for every inequality, h_j(x) = 0 for every equality}`.
///
/// Support constraints always use this closed description. Strict membership
/// (`g > 0`) is only used when classifying points.
#[derive(Clone, Debug, PartialEq)]
pub struct SemialgebraicSet {
    nvars: usize,
    pub inequalities: Vec<Polynomial>,
    pub equalities: Vec<Polynomial>,
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }
}

enum Bounds {
    Empty,
    Box(Vec<f64>, Vec<f64>),
}

impl SemialgebraicSet {
    pub fn new(nvars: usize, inequalities: Vec<Polynomial>, equalities: Vec<Polynomial>) -> Self {
        for p in inequalities.iter().chain(&equalities) {
            assert_eq!(p.nvars(), nvars, "set polynomial dimension mismatch");
        }
        SemialgebraicSet {
            nvars,
            inequalities,
            equalities,
        }
    }

    /// `{x : r^2 - |x - center|^2 >= 0}`.
    pub fn ball(center: &[f64], radius: f64) -> Self {
        let n = center.len();
        let mut g = Polynomial::constant(n, radius * radius);
        for (i, c) in center.iter().enumerate() {
            let d = &Polynomial::var(n, i) - &Polynomial::constant(n, *c);
            g = &g - &(&d * &d);
        }
        SemialgebraicSet::new(n, vec![g], vec![])
    }

    /// Box described by `2n` linear inequalities `x_i - lo_i >= 0`, `hi_i - x_i >= 0`.
    pub fn boxed(lo: &[f64], hi: &[f64]) -> Self {
        let n = lo.len();
        let mut ineq = Vec::with_capacity(2 * n);
        for i in 0..n {
            ineq.push(&Polynomial::var(n, i) - &Polynomial::constant(n, lo[i]));
            ineq.push(&Polynomial::constant(n, hi[i]) - &Polynomial::var(n, i));
        }
        SemialgebraicSet::new(n, ineq, vec![])
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    /// Largest degree among the describing polynomials.
    pub fn max_degree(&self) -> usize {
        self.inequalities
            .iter()
            .chain(&self.equalities)
            .map(|p| p.degree())
            .max()
            .unwrap_or(0)
    }

    /// Closed-set membership: `g >= -tol`, `|h| <= tol`.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.inequalities.iter().all(|g| g.eval(x) >= -tol)
            && self.equalities.iter().all(|h| h.eval(x).abs() <= tol)
    }

    /// Open-set membership: every inequality strictly positive.
    pub fn contains_strict(&self, x: &[f64]) -> bool {
        self.inequalities.iter().all(|g| g.eval(x) > 0.0)
            && self.equalities.iter().all(|h| h.eval(x) == 0.0)
    }

    /// `Some(center, radius)` when the set is exactly one Euclidean ball.
    pub fn ball_shape(&self) -> Option<(Vec<f64>, f64)> {
        if self.inequalities.len() != 1 || !self.equalities.is_empty() {
            return None;
        }
        let q = quadratic_form(&self.inequalities[0], self.nvars)?;
        let a = -q.sq[0];
        if a <= 0.0 || q.sq.iter().any(|&s| (s + a).abs() > 1e-14 * a) || q.cross {
            return None;
        }
        let center: Vec<f64> = q.lin.iter().map(|b| b / (2.0 * a)).collect();
        let r2 = q.c / a + center.iter().map(|c| c * c).sum::<f64>();
        (r2 > 0.0).then(|| (center, r2.sqrt()))
    }

    /// `Some(lo, hi)` when the set is exactly an axis-aligned box given by
    /// single-variable linear inequalities.
    pub fn box_shape(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        if !self.equalities.is_empty() || self.inequalities.is_empty() {
            return None;
        }
        let n = self.nvars;
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        for g in &self.inequalities {
            let (i, a, b) = single_linear(g, n)?;
            let t = -b / a;
            if a > 0.0 {
                lo[i] = lo[i].max(t);
            } else {
                hi[i] = hi[i].min(t);
            }
        }
        if lo.iter().chain(&hi).any(|v| !v.is_finite()) || lo.iter().zip(&hi).any(|(l, h)| l >= h) {
            return None;
        }
        Some((lo, hi))
    }

    fn bounds(&self) -> Option<Bounds> {
        let n = self.nvars;
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        for g in self.inequalities.iter().chain(&self.equalities) {
            if let Some((i, a, b)) = single_linear(g, n) {
                let t = -b / a;
                if a > 0.0 {
                    lo[i] = lo[i].max(t);
                } else {
                    hi[i] = hi[i].min(t);
                }
                continue;
            }
            let Some(q) = quadratic_form(g, n) else { continue };
            if q.cross {
                continue;
            }
            // -sum a_j x_j^2 + sum b_j x_j + c >= 0 over the variables with a_j > 0;
            // only usable when the remaining variables do not appear at all.
            let active: Vec<usize> = (0..n).filter(|&j| q.sq[j] != 0.0 || q.lin[j] != 0.0).collect();
            if active.is_empty() || active.iter().any(|&j| q.sq[j] >= 0.0) {
                continue;
            }
            let mut r = q.c;
            for &j in &active {
                let a = -q.sq[j];
                r += q.lin[j] * q.lin[j] / (4.0 * a);
            }
            if r < 0.0 {
                return Some(Bounds::Empty);
            }
            for &j in &active {
                let a = -q.sq[j];
                let c = q.lin[j] / (2.0 * a);
                let w = (r / a).sqrt();
                lo[j] = lo[j].max(c - w);
                hi[j] = hi[j].min(c + w);
            }
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Some(Bounds::Empty);
        }
        if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
            return None;
        }
        Some(Bounds::Box(lo, hi))
    }

    /// Axis-aligned box containing the set, derived from its ball, interval
    /// and linear constraints.
    pub fn bounding_box(&self) -> Result<BoundingBox, SetError> {
        match self.bounds() {
            Some(Bounds::Box(lo, hi)) => Ok(BoundingBox { lo, hi }),
            Some(Bounds::Empty) => Err(SetError::EmptyOrThin {
                accepted: 0,
                proposals: 0,
            }),
            None => Err(SetError::Unbounded),
        }
    }

    /// Lebesgue moments up to degree `d`: exact for balls and boxes, Monte
    /// Carlo otherwise.
    pub fn lebesgue_moments(&self, d: usize, mc: MonteCarloSpec) -> Result<LebesgueMoments, SetError> {
        if let Some((c, r)) = self.ball_shape() {
            return Ok(LebesgueMoments {
                moments: lebesgue_moments_ball(&c, r, d),
                method: MomentMethod::Analytic,
            });
        }
        if let Some((lo, hi)) = self.box_shape() {
            return Ok(LebesgueMoments {
                moments: lebesgue_moments_box(&lo, &hi, d),
                method: MomentMethod::Analytic,
            });
        }
        let moments = monte_carlo_moments(self, d, mc)?;
        Ok(LebesgueMoments {
            moments,
            method: MomentMethod::MonteCarlo {
                samples: mc.samples,
                seed: mc.seed,
            },
        })
    }
}

struct Quadratic {
    sq: Vec<f64>,
    lin: Vec<f64>,
    c: f64,
    cross: bool,
}

fn quadratic_form(g: &Polynomial, n: usize) -> Option<Quadratic> {
    if g.degree() > 2 {
        return None;
    }
    let mut q = Quadratic {
        sq: vec![0.0; n],
        lin: vec![0.0; n],
        c: 0.0,
        cross: false,
    };
    for (a, c) in g.terms() {
        let e = a.exponents();
        match a.degree() {
            0 => q.c = c,
            1 => q.lin[e.iter().position(|&x| x == 1).unwrap()] = c,
            _ => match e.iter().position(|&x| x == 2) {
                Some(j) => q.sq[j] = c,
                None => q.cross = true,
            },
        }
    }
    Some(q)
}

/// `a * x_i + b` with `a != 0`.
fn single_linear(g: &Polynomial, n: usize) -> Option<(usize, f64, f64)> {
    if g.degree() != 1 {
        return None;
    }
    let mut var = None;
    let mut b = 0.0;
    for (a, c) in g.terms() {
        if a.degree() == 0 {
            b = c;
        } else if var.is_some() {
            return None;
        } else {
            var = Some((a.exponents().iter().position(|&x| x == 1).unwrap(), c));
        }
    }
    let (i, a) = var?;
    debug_assert!(i < n);
    Some((i, a, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSpec {
    pub samples: usize,
    pub seed: u64,
}

impl Default for MonteCarloSpec {
    fn default() -> Self {
        MonteCarloSpec {
            samples: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MomentMethod {
    Analytic,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct LebesgueMoments {
    pub moments: MomentVector,
    pub method: MomentMethod,
}

/// `y_alpha = prod_j (hi_j^(a_j+1) - lo_j^(a_j+1)) / (a_j + 1)`.
pub fn lebesgue_moments_box(lo: &[f64], hi: &[f64], d: usize) -> MomentVector {
    let n = lo.len();
    let values = monomial_basis(n, d)
        .iter()
        .map(|a| {
            a.exponents()
                .iter()
                .enumerate()
                .map(|(j, &e)| {
                    let p = e as i32 + 1;
                    (hi[j].powi(p) - lo[j].powi(p)) / p as f64
                })
                .product()
        })
        .collect();
    MomentVector::new(n, d, values)
}

/// `Gamma(k / 2)` for positive integers `k`.
fn gamma_half(k: u32) -> f64 {
    match k {
        1 => PI.sqrt(),
        2 => 1.0,
        _ => (k as f64 / 2.0 - 1.0) * gamma_half(k - 2),
    }
}

/// Integral of `z^gamma` over the ball of radius `r` centered at the origin.
fn centered_ball_moment(gamma: &[u32], r: f64) -> f64 {
    if gamma.iter().any(|g| g % 2 == 1) {
        return 0.0;
    }
    let n = gamma.len() as u32;
    let deg: u32 = gamma.iter().sum();
    let num: f64 = gamma.iter().map(|&g| gamma_half(g + 1)).product();
    // sum_j (g_j + 1)/2 = (deg + n)/2
    let sphere = 2.0 * num / gamma_half(deg + n);
    sphere / (deg + n) as f64 * r.powi((deg + n) as i32)
}

/// Monomial moments of the Lebesgue measure on the ball `|x - center| <= r`.
pub fn lebesgue_moments_ball(center: &[f64], r: f64, d: usize) -> MomentVector {
    let n = center.len();
    let basis = monomial_basis(n, d);
    let values = basis
        .iter()
        .map(|a| {
            // expand prod_j (c_j + z_j)^{a_j} and integrate each z^gamma
            let mut total = 0.0;
            for gamma in monomial_basis(n, a.degree() as usize) {
                if !a.divisible_by(&gamma) {
                    continue;
                }
                let mut coef = 1.0;
                for j in 0..n {
                    let (aj, gj) = (a.exponents()[j], gamma.exponents()[j]);
                    coef *= binomial(aj as usize, gj as usize) as f64 * center[j].powi((aj - gj) as i32);
                }
                if coef != 0.0 {
                    total += coef * centered_ball_moment(gamma.exponents(), r);
                }
            }
            total
        })
        .collect();
    MomentVector::new(n, d, values)
}

/// Monte Carlo moments of the Lebesgue measure on `set`, using uniform
/// samples from its bounding box.
pub fn monte_carlo_moments(set: &SemialgebraicSet, d: usize, mc: MonteCarloSpec) -> Result<MomentVector, SetError> {
    let bb = set.bounding_box()?;
    let n = set.nvars();
    let basis = monomial_basis(n, d);
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    let mut sums = vec![0.0; basis.len()];
    let mut x = vec![0.0; n];
    for _ in 0..mc.samples {
        for j in 0..n {
            x[j] = rng.gen_range(bb.lo[j]..bb.hi[j]);
        }
        if set.contains(&x, 0.0) {
            for (s, a) in sums.iter_mut().zip(&basis) {
                *s += monomial_value(a, &x);
            }
        }
    }
    let w = bb.volume() / mc.samples as f64;
    Ok(MomentVector::new(n, d, sums.into_iter().map(|s| s * w).collect()))
}

pub(crate) fn monomial_value(a: &MultiIndex, x: &[f64]) -> f64 {
    a.exponents()
        .iter()
        .zip(x)
        .map(|(&e, xi)| xi.powi(e as i32))
        .product()
}

/// Pieces `{g_T^i <= 0} ∩ closure(X)` whose union is `closure(X) \ X_T`.
pub fn complement_pieces(x: &SemialgebraicSet, target: &SemialgebraicSet) -> Vec<SemialgebraicSet> {
    target
        .inequalities
        .iter()
        .map(|gt| {
            let mut ineq = vec![-gt];
            ineq.extend(x.inequalities.iter().cloned());
            SemialgebraicSet::new(x.nvars(), ineq, x.equalities.clone())
        })
        .collect()
}

/// Pieces `{g_X^i = 0, g_X^j >= 0 (j != i)}` whose union is the boundary of X.
pub fn boundary_pieces(x: &SemialgebraicSet) -> Vec<SemialgebraicSet> {
    (0..x.inequalities.len())
        .map(|i| {
            let ineq = x
                .inequalities
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, g)| g.clone())
                .collect();
            let mut eq = vec![x.inequalities[i].clone()];
            eq.extend(x.equalities.iter().cloned());
            SemialgebraicSet::new(x.nvars(), ineq, eq)
        })
        .collect()
}

/// Draws up to `count` points of `set`, deterministically for a fixed seed.
///
/// Full-dimensional sets use rejection sampling in the bounding box. Sets with
/// equalities are sampled by intersecting random lines with the first
/// equality surface and keeping roots that satisfy every other constraint.
pub fn sample(set: &SemialgebraicSet, count: usize, seed: u64) -> Result<Vec<Vec<f64>>, SetError> {
    let bb = set.bounding_box()?;
    let n = set.nvars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut proposals = 0usize;
    while out.len() < count && proposals < MAX_PROPOSALS {
        proposals += 1;
        let p: Vec<f64> = (0..n).map(|j| rng.gen_range(bb.lo[j]..=bb.hi[j])).collect();
        if set.equalities.is_empty() {
            if set.contains(&p, 0.0) {
                out.push(p);
            }
            continue;
        }
        let dir = random_direction(&mut rng, n);
        if let Some(x) = project_along_ray(set, &bb, &p, &dir, &mut rng) {
            out.push(x);
        }
    }
    if out.len() < count && (out.len() as f64) < MIN_ACCEPTANCE * proposals as f64 {
        return Err(SetError::EmptyOrThin {
            accepted: out.len(),
            proposals,
        });
    }
    Ok(out)
}

fn random_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-3 && norm <= 1.0 {
            return d.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Coefficients (lowest degree first) of `t -> g(p + t d)`.
fn restrict_to_line(g: &Polynomial, p: &[f64], d: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.degree() + 1];
    for (a, c) in g.terms() {
        let mut uni = vec![c];
        for (j, &e) in a.exponents().iter().enumerate() {
            for _ in 0..e {
                let mut next = vec![0.0; uni.len() + 1];
                for (k, u) in uni.iter().enumerate() {
                    next[k] += u * p[j];
                    next[k + 1] += u * d[j];
                }
                uni = next;
            }
        }
        for (k, u) in uni.into_iter().enumerate() {
            out[k] += u;
        }
    }
    out
}

fn horner(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, v| acc * t + v)
}

fn project_along_ray(
    set: &SemialgebraicSet,
    bb: &BoundingBox,
    p: &[f64],
    dir: &[f64],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<f64>> {
    // parameter range keeping p + t d inside the box
    let (mut tlo, mut thi) = (f64::NEG_INFINITY, f64::INFINITY);
    for j in 0..p.len() {
        if dir[j].abs() < 1e-15 {
            continue;
        }
        let a = (bb.lo[j] - p[j]) / dir[j];
        let b = (bb.hi[j] - p[j]) / dir[j];
        tlo = tlo.max(a.min(b));
        thi = thi.min(a.max(b));
    }
    if !(tlo < thi) {
        return None;
    }
    let q = restrict_to_line(&set.equalities[0], p, dir);
    let dq: Vec<f64> = q.iter().enumerate().skip(1).map(|(k, c)| k as f64 * c).collect();
    const GRID: usize = 64;
    let h = (thi - tlo) / GRID as f64;
    let mut roots = Vec::new();
    let mut prev = horner(&q, tlo);
    for i in 1..=GRID {
        let t = tlo + h * i as f64;
        let cur = horner(&q, t);
        if prev == 0.0 {
            roots.push(t - h);
        } else if prev * cur < 0.0 {
            let (mut a, mut b) = (t - h, t);
            let mut fa = prev;
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                let fm = horner(&q, m);
                if fa * fm <= 0.0 {
                    b = m;
                } else {
                    a = m;
                    fa = fm;
                }
                if b - a < 1e-15 * (1.0 + m.abs()) {
                    break;
                }
            }
            let mut r = 0.5 * (a + b);
            for _ in 0..3 {
                let d = horner(&dq, r);
                if d.abs() > 1e-300 {
                    r -= horner(&q, r) / d;
                }
            }
            roots.push(r);
        }
        prev = cur;
    }
    if roots.is_empty() {
        return None;
    }
    let t = roots[rng.gen_range(0..roots.len())];
    let x: Vec<f64> = p.iter().zip(dir).map(|(a, b)| a + t * b).collect();
    let ok = set.inequalities.iter().all(|g| g.eval(&x) >= 0.0)
        && set.equalities.iter().all(|h| h.eval(&x).abs() <= 1e-9);
    ok.then_some(x)
}

/// State constraint set, target set and input bound of a control problem in
/// the canonical `[0, u_max]^m` input convention.
#[derive(Clone, Debug)]
pub struct ProblemSets {
    pub x: SemialgebraicSet,
    pub target: SemialgebraicSet,
    pub u_max: f64,
    pub m: usize,
}

impl ProblemSets {
    /// Checks compactness of X (a bounding box exists) and, by sampling, that
    /// the target lies inside X.
    pub fn new(x: SemialgebraicSet, target: SemialgebraicSet, u_max: f64, m: usize) -> Result<Self, SetError> {
        if x.nvars() != target.nvars() {
            return Err(SetError::DimensionMismatch {
                expected: x.nvars(),
                got: target.nvars(),
            });
        }
        assert!(u_max >= 0.0, "u_max must be nonnegative");
        x.bounding_box()?;
        let pts = sample(&target, 1000, 0x7a)?;
        if let Some(p) = pts.into_iter().find(|p| !x.contains(p, 1e-12)) {
            return Err(SetError::TargetNotInside(p));
        }
        Ok(ProblemSets { x, target, u_max, m })
    }

    pub fn nvars(&self) -> usize {
        self.x.nvars()
    }

    pub fn complement_pieces(&self) -> Vec<SemialgebraicSet> {
        complement_pieces(&self.x, &self.target)
    }

    pub fn boundary_pieces(&self) -> Vec<SemialgebraicSet> {
        boundary_pieces(&self.x)
    }
}
