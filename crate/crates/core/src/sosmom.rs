//! Moment vectors, moment and localizing matrices, and the compilation of
//! measure supports and SOS certificates into conic programs.
//!
//! A measure on a set `K = {g_j >= 0, h = 0}` contributes one dual row per
//! moment. Its moment and localizing matrices become dual slacks of PSD
//! blocks, so the primal side of the same program holds the Gram matrices of
//! the matching SOS certificate. On sets with an equality `h = 0` moments are
//! kept only for monomials in normal form modulo `h`; every other moment is a
//! fixed linear combination of those, which enforces `L(h q) = 0` for all `q`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{ConicSolution, ProgramBuilder, PsdBlock};
use crate::polyalg::{count_up_to, monomial_basis, MultiIndex, Polynomial};
use crate::semisets::SemialgebraicSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentError {
    #[error("degree shortfall: need moments up to degree {needed}, have {available}")]
    DegreeShortfall { needed: usize, available: usize },
    #[error("dimension mismatch: expected {expected} variables, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degree budget {budget} cannot hold {what} of degree {degree}")]
    DegreeBudget { budget: usize, what: String, degree: usize },
}

/// Truncated moment sequence `y_alpha = int x^alpha dmu` for `|alpha| <= d`,
/// indexed by graded-lex rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl MomentVector {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), count_up_to(n, d), "moment vector length");
        MomentVector { n, d, values }
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self::new(n, d, vec![0.0; count_up_to(n, d)])
    }

    /// Moments of the unit point mass at `a`.
    pub fn dirac(a: &[f64], d: usize) -> Self {
        let n = a.len();
        let values = monomial_basis(n, d).iter().map(|al| crate::semisets::monomial_value(al, a)).collect();
        Self::new(n, d, values)
    }

    pub fn nvars(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Moment of `x^alpha`; panics when `|alpha| > d`.
    pub fn get(&self, alpha: &MultiIndex) -> f64 {
        assert!(alpha.degree() as usize <= self.d, "moment degree out of range");
        self.values[alpha.rank()]
    }

    pub fn mass(&self) -> f64 {
        self.values[0]
    }

    pub fn truncate(&self, d: usize) -> MomentVector {
        assert!(d <= self.d);
        MomentVector::new(self.n, d, self.values[..count_up_to(self.n, d)].to_vec())
    }

    /// `int p dmu` for `deg p <= d`.
    pub fn integrate(&self, p: &Polynomial) -> Result<f64, MomentError> {
        if p.nvars() != self.n {
            return Err(MomentError::DimensionMismatch {
                expected: self.n,
                got: p.nvars(),
            });
        }
        if p.degree() > self.d {
            return Err(MomentError::DegreeShortfall {
                needed: p.degree(),
                available: self.d,
            });
        }
        Ok(p.terms().map(|(a, c)| c * self.values[a.rank()]).sum())
    }

    pub fn scaled(&self, s: f64) -> MomentVector {
        MomentVector::new(self.n, self.d, self.values.iter().map(|v| v * s).collect())
    }
}

pub fn moment_matrix(y: &MomentVector, k: usize) -> Result<DMatrix<f64>, MomentError> {
    localizing_matrix(y, &Polynomial::constant(y.n, 1.0), k)
}

/// Entry `(a, b)` is `sum_gamma g_gamma y_{a+b+gamma}` over the basis of
/// degree `k - ceil(deg g / 2)`.
pub fn localizing_matrix(y: &MomentVector, g: &Polynomial, k: usize) -> Result<DMatrix<f64>, MomentError> {
    if g.nvars() != y.n {
        return Err(MomentError::DimensionMismatch {
            expected: y.n,
            got: g.nvars(),
        });
    }
    let half = localizing_half_degree(g, k).ok_or(MomentError::DegreeShortfall {
        needed: g.degree(),
        available: 2 * k,
    })?;
    if 2 * half + g.degree() > y.d {
        return Err(MomentError::DegreeShortfall {
            needed: 2 * half + g.degree(),
            available: y.d,
        });
    }
    let basis = monomial_basis(y.n, half);
    let s = basis.len();
    let mut m = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in 0..=i {
            let ab = basis[i].add(&basis[j]);
            let v: f64 = g.terms().map(|(gm, c)| c * y.values[ab.add(gm).rank()]).sum();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// `k - ceil(deg g / 2)`, or `None` when negative.
pub fn localizing_half_degree(g: &Polynomial, k: usize) -> Option<usize> {
    k.checked_sub(g.degree().div_ceil(2))
}

/// Normal forms of monomials modulo one polynomial `h`, using the graded-lex
/// leading monomial of `h`.
#[derive(Clone, Debug)]
struct Reducer {
    lead: MultiIndex,
    /// `x^lead = tail` modulo `h`.
    tail: Vec<(MultiIndex, f64)>,
    cache: BTreeMap<MultiIndex, Vec<(MultiIndex, f64)>>,
}

impl Reducer {
    fn new(h: &Polynomial) -> Self {
        let lead = h.leading_monomial().expect("nonzero equality").clone();
        let lc = h.coeff(&lead);
        let tail = h.terms().filter(|(a, _)| **a != lead).map(|(a, c)| (a.clone(), -c / lc)).collect();
        Reducer {
            lead,
            tail,
            cache: BTreeMap::new(),
        }
    }

    fn is_standard(&self, a: &MultiIndex) -> bool {
        !a.divisible_by(&self.lead)
    }

    /// Fills the cache for every monomial up to degree `d` in ascending order.
    fn prepare(&mut self, n: usize, d: usize) {
        for a in monomial_basis(n, d) {
            if self.cache.contains_key(&a) {
                continue;
            }
            let nf = if self.is_standard(&a) {
                vec![(a.clone(), 1.0)]
            } else {
                let quot = MultiIndex::new(a.exponents().iter().zip(self.lead.exponents()).map(|(x, l)| x - l).collect());
                let mut acc: BTreeMap<MultiIndex, f64> = BTreeMap::new();
                for (t, c) in &self.tail {
                    for (s, cs) in &self.cache[&quot.add(t)] {
                        *acc.entry(s.clone()).or_insert(0.0) += c * cs;
                    }
                }
                acc.into_iter().filter(|(_, c)| *c != 0.0).collect()
            };
            self.cache.insert(a, nf);
        }
    }

    fn normal_form(&self, a: &MultiIndex) -> &[(MultiIndex, f64)] {
        &self.cache[a]
    }
}

/// Rows and PSD blocks allocated for one measure.
#[derive(Clone, Debug)]
pub struct MeasureBlock {
    nvars: usize,
    degree: usize,
    first_row: usize,
    /// Monomials carrying a row, in row order.
    basis: Vec<MultiIndex>,
    row_of: BTreeMap<MultiIndex, usize>,
    reducer: Option<Reducer>,
    /// PSD block, multiplier and Gram basis for the moment matrix and each
    /// localizing matrix.
    pub blocks: Vec<(PsdBlock, Polynomial, Vec<MultiIndex>)>,
    /// Free columns pinning extra equalities `L(h x^gamma) = 0`.
    pub equality_columns: Vec<(usize, Polynomial, Vec<MultiIndex>)>,
}

impl MeasureBlock {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn num_rows(&self) -> usize {
        self.basis.len()
    }

    pub fn first_row(&self) -> usize {
        self.first_row
    }

    pub fn mass_row(&self) -> usize {
        self.first_row
    }

    /// Row monomials in row order.
    pub fn row_monomials(&self) -> &[MultiIndex] {
        &self.basis
    }

    /// `L(x^alpha)` as a combination of this measure's rows.
    pub fn monomial_functional(&self, a: &MultiIndex) -> Vec<(usize, f64)> {
        match &self.reducer {
            None => vec![(self.row_of[a], 1.0)],
            Some(r) => r.normal_form(a).iter().map(|(s, c)| (self.row_of[s], *c)).collect(),
        }
    }

    /// `L(p)` as a combination of rows; `deg p` must not exceed the degree.
    pub fn functional(&self, p: &Polynomial) -> Vec<(usize, f64)> {
        assert!(p.degree() <= self.degree, "integrand degree {} above moment degree {}", p.degree(), self.degree);
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (a, c) in p.terms() {
            for (r, v) in self.monomial_functional(a) {
                *acc.entry(r).or_insert(0.0) += c * v;
            }
        }
        acc.into_iter().filter(|(_, v)| *v != 0.0).collect()
    }

    /// Full moment vector recovered from the dual rows `y`.
    pub fn decode(&self, y: &[f64]) -> MomentVector {
        let values = monomial_basis(self.nvars, self.degree)
            .iter()
            .map(|a| self.monomial_functional(a).iter().map(|(r, c)| c * y[*r]).sum())
            .collect();
        MomentVector::new(self.nvars, self.degree, values)
    }

    /// Gram matrices of the SOS multipliers carried by this measure's blocks.
    pub fn gram_matrices(&self, b: &ProgramBuilder, x: &[f64]) -> Vec<DMatrix<f64>> {
        self.blocks.iter().map(|(blk, _, _)| gram_from_primal(b, *blk, x)).collect()
    }

    /// The certificate polynomial `sum_j g_j sigma_j` of this measure's blocks
    /// evaluated at primal `x`, plus the equality multiplier part.
    pub fn certificate(&self, b: &ProgramBuilder, x: &[f64]) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (blk, g, basis) in &self.blocks {
            let gram = gram_from_primal(b, *blk, x);
            out = out + g.clone() * gram_polynomial(&gram, basis);
        }
        out
    }
}

pub fn gram_from_primal(b: &ProgramBuilder, blk: PsdBlock, x: &[f64]) -> DMatrix<f64> {
    let s = b.psd_size(blk);
    DMatrix::from_fn(s, s, |i, j| {
        let (col, f) = b.psd_column(blk, i, j);
        x[col] / f
    })
}

/// `z' G z` for the monomial vector `z` over `basis`.
pub fn gram_polynomial(g: &DMatrix<f64>, basis: &[MultiIndex]) -> Polynomial {
    let n = basis.first().map_or(0, |a| a.nvars());
    let mut terms = Vec::with_capacity(basis.len() * basis.len());
    for (i, a) in basis.iter().enumerate() {
        for (j, b) in basis.iter().enumerate() {
            terms.push((a.add(b), g[(i, j)]));
        }
    }
    Polynomial::from_terms(n, terms)
}

/// Allocates moment rows of degree `d` for a measure supported on `set`
/// and emits its moment and localizing blocks.
pub fn compile_measure_block(b: &mut ProgramBuilder, set: &SemialgebraicSet, d: usize) -> Result<MeasureBlock, MomentError> {
    let n = set.nvars();
    if d < set.max_degree() {
        return Err(MomentError::DegreeShortfall {
            needed: set.max_degree(),
            available: d,
        });
    }
    let k = d / 2;
    let mut reducer = set.equalities.first().map(Reducer::new);
    if let Some(r) = reducer.as_mut() {
        r.prepare(n, d);
    }
    let lead = reducer.as_ref().map(|r| r.lead.clone());
    let standard = |a: &MultiIndex| lead.as_ref().is_none_or(|l| !a.divisible_by(l));
    let basis: Vec<MultiIndex> = monomial_basis(n, d).into_iter().filter(|a| standard(a)).collect();
    let first_row = b.add_rows(basis.len());
    let row_of = basis.iter().cloned().enumerate().map(|(i, a)| (a, first_row + i)).collect();
    let mut mb = MeasureBlock {
        nvars: n,
        degree: d,
        first_row,
        basis,
        row_of,
        reducer,
        blocks: Vec::new(),
        equality_columns: Vec::new(),
    };
    let mut mults = vec![Polynomial::constant(n, 1.0)];
    mults.extend(set.inequalities.iter().cloned());
    for g in mults {
        let Some(half) = localizing_half_degree(&g, k) else {
            continue;
        };
        let gbasis: Vec<MultiIndex> = monomial_basis(n, half).into_iter().filter(|a| standard(a)).collect();
        if gbasis.is_empty() {
            continue;
        }
        let blk = b.add_psd(gbasis.len());
        for i in 0..gbasis.len() {
            for j in 0..gbasis.len() {
                let ab = gbasis[i].add(&gbasis[j]);
                let entry = Polynomial::monomial(ab, 1.0) * g.clone();
                for (row, v) in mb.functional(&entry) {
                    b.coef_psd(row, blk, i, j, -v);
                }
            }
        }
        mb.blocks.push((blk, g, gbasis));
    }
    for h in set.equalities.iter().skip(1) {
        let Some(room) = d.checked_sub(h.degree()) else {
            continue;
        };
        let gammas = monomial_basis(n, room);
        let start = b.add_free(gammas.len());
        for (t, gm) in gammas.iter().enumerate() {
            let p = Polynomial::monomial(gm.clone(), 1.0) * h.clone();
            for (row, v) in mb.functional(&p) {
                b.coef_free(row, start + t, v);
            }
        }
        mb.equality_columns.push((start, h.clone(), gammas));
    }
    Ok(mb)
}

/// Adds the moment equality `sum_r coef_r y_r = rhs` as a free primal column
/// and returns that column.
pub fn add_moment_equality(b: &mut ProgramBuilder, terms: &[(usize, f64)], rhs: f64) -> usize {
    let col = b.add_free(1);
    for &(r, v) in terms {
        b.coef_free(r, col, v);
    }
    if rhs != 0.0 {
        b.cost_free(col, rhs);
    }
    col
}

/// Polynomial that is affine in free decision variables:
/// `constant + sum_j x_j * p_j`.
#[derive(Clone, Debug)]
pub struct AffinePoly {
    pub constant: Polynomial,
    pub linear: Vec<(usize, Polynomial)>,
}

impl AffinePoly {
    pub fn degree(&self) -> usize {
        self.linear.iter().map(|(_, p)| p.degree()).fold(self.constant.degree(), usize::max)
    }

    pub fn evaluate(&self, x: &[f64]) -> Polynomial {
        let mut out = self.constant.clone();
        for (j, p) in &self.linear {
            out = out + p.scale(x[*j]);
        }
        out
    }
}

impl From<Polynomial> for AffinePoly {
    fn from(p: Polynomial) -> Self {
        AffinePoly {
            constant: p,
            linear: Vec::new(),
        }
    }
}

/// `target = sigma_0 + sum_j g_j sigma_j (+ sum_e h_e q_e)` with each
/// `sigma` SOS and each `q_e` a free polynomial.
#[derive(Clone, Debug)]
pub struct GramConstraint {
    pub target: AffinePoly,
    /// Multiplier and Gram half-degree; `sigma_0` is the piece `g = 1`.
    pub pieces: Vec<(Polynomial, usize)>,
    /// Equality multipliers and the degree of their free polynomial.
    pub equalities: Vec<(Polynomial, usize)>,
}

impl GramConstraint {
    /// Standard certificate of nonnegativity on `set` with every piece
    /// filling the degree budget `d`.
    pub fn on_set(target: impl Into<AffinePoly>, set: &SemialgebraicSet, d: usize) -> Self {
        let n = set.nvars();
        let mut pieces = vec![(Polynomial::constant(n, 1.0), d / 2)];
        for g in &set.inequalities {
            if let Some(h) = d.checked_sub(g.degree()) {
                pieces.push((g.clone(), h / 2));
            }
        }
        let equalities = set
            .equalities
            .iter()
            .filter_map(|h| d.checked_sub(h.degree()).map(|r| (h.clone(), r)))
            .collect();
        GramConstraint {
            target: target.into(),
            pieces,
            equalities,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SosHandle {
    pub nvars: usize,
    pub degree: usize,
    pub first_row: usize,
    pub blocks: Vec<(PsdBlock, Polynomial, Vec<MultiIndex>)>,
    pub equality_columns: Vec<(usize, Polynomial, Vec<MultiIndex>)>,
}

impl SosHandle {
    /// `(sigma_0 + sum g_j sigma_j + sum h_e q_e)` at the primal point `x`.
    pub fn decomposition(&self, b: &ProgramBuilder, x: &[f64]) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (blk, g, basis) in &self.blocks {
            out = out + g.clone() * gram_polynomial(&gram_from_primal(b, *blk, x), basis);
        }
        for (start, h, gammas) in &self.equality_columns {
            let q = Polynomial::from_coefficients(gammas, &x[*start..*start + gammas.len()]);
            out = out + h.clone() * q;
        }
        out
    }
}

/// Emits one coefficient-matching row per monomial of degree `<= d`.
pub fn compile_sos_constraint(b: &mut ProgramBuilder, c: &GramConstraint, d: usize) -> Result<SosHandle, MomentError> {
    let n = c.target.constant.nvars();
    if c.target.degree() > d {
        return Err(MomentError::DegreeBudget {
            budget: d,
            what: "target".into(),
            degree: c.target.degree(),
        });
    }
    for (g, h) in &c.pieces {
        if 2 * h + g.degree() > d {
            return Err(MomentError::DegreeBudget {
                budget: d,
                what: format!("multiplier {g}"),
                degree: 2 * h + g.degree(),
            });
        }
    }
    for (h, r) in &c.equalities {
        if r + h.degree() > d {
            return Err(MomentError::DegreeBudget {
                budget: d,
                what: format!("equality multiplier {h}"),
                degree: r + h.degree(),
            });
        }
    }
    let first_row = b.add_rows(count_up_to(n, d));
    let row = |a: &MultiIndex| first_row + a.rank();
    for (a, v) in c.target.constant.terms() {
        b.add_rhs(row(a), v);
    }
    for (j, p) in &c.target.linear {
        for (a, v) in p.terms() {
            b.coef_free(row(a), *j, -v);
        }
    }
    let mut blocks = Vec::new();
    for (g, h) in &c.pieces {
        let basis = monomial_basis(n, *h);
        let blk = b.add_psd(basis.len());
        for i in 0..basis.len() {
            for j in 0..basis.len() {
                let ab = basis[i].add(&basis[j]);
                for (gm, v) in g.terms() {
                    b.coef_psd(row(&ab.add(gm)), blk, i, j, v);
                }
            }
        }
        blocks.push((blk, g.clone(), basis));
    }
    let mut equality_columns = Vec::new();
    for (h, r) in &c.equalities {
        let gammas = monomial_basis(n, *r);
        let start = b.add_free(gammas.len());
        for (t, gm) in gammas.iter().enumerate() {
            for (hm, v) in h.terms() {
                b.coef_free(row(&gm.add(hm)), start + t, v);
            }
        }
        equality_columns.push((start, h.clone(), gammas));
    }
    Ok(SosHandle {
        nvars: n,
        degree: d,
        first_row,
        blocks,
        equality_columns,
    })
}

/// Dual rows of a solved program restricted to one measure.
pub fn measure_moments(mb: &MeasureBlock, sol: &ConicSolution) -> MomentVector {
    mb.decode(&sol.dual)
}
