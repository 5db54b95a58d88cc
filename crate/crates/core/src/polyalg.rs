//! Sparse multivariate polynomials over `f64` with a fixed graded-lex order.
//!
//! Monomials are ordered first by total degree and then lexicographically with
//! `x1` as the most significant variable. Within one degree the larger
//! exponent of `x1` comes first, so the degree-one basis in two variables is
//! `[1, x1, x2]`. Every moment vector, Gram basis and file format in this
//! crate indexes monomials by their rank in this order.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

/// Coefficients with magnitude below this are dropped after arithmetic.
pub const CANONICAL_EPS: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("dimension mismatch: expected {expected} variables, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parse error at column {column}: {message}")]
    Parse { column: usize, message: String },
}

/// Exponent vector of a monomial `x1^a1 ... xn^an`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(exponents: Vec<u32>) -> Self {
        MultiIndex(exponents)
    }

    pub fn zero(n: usize) -> Self {
        MultiIndex(vec![0; n])
    }

    /// The exponent vector of the single variable `x_{i+1}`.
    pub fn unit(n: usize, i: usize) -> Self {
        let mut e = vec![0; n];
        e[i] = 1;
        MultiIndex(e)
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// True when `other` divides this monomial.
    pub fn divisible_by(&self, other: &MultiIndex) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a >= b)
    }

    /// Rank in the graded-lex enumeration of all monomials in `nvars` variables.
    pub fn rank(&self) -> usize {
        let n = self.0.len();
        let deg = self.degree() as usize;
        let mut r = if deg == 0 { 0 } else { count_up_to(n, deg - 1) };
        let mut rem = deg;
        for i in 0..n.saturating_sub(1) {
            let a = self.0[i] as usize;
            for e in (a + 1)..=rem {
                r += count_exact(n - i - 1, rem - e);
            }
            rem -= a;
        }
        r
    }

    /// Inverse of [`MultiIndex::rank`].
    pub fn unrank(n: usize, rank: usize) -> MultiIndex {
        assert!(n >= 1);
        let mut deg = 0;
        let mut pos = rank;
        loop {
            let c = count_exact(n, deg);
            if pos < c {
                break;
            }
            pos -= c;
            deg += 1;
        }
        let mut exps = vec![0u32; n];
        let mut rem = deg;
        for i in 0..n - 1 {
            for e in (0..=rem).rev() {
                let c = count_exact(n - i - 1, rem - e);
                if pos < c {
                    exps[i] = e as u32;
                    rem -= e;
                    break;
                }
                pos -= c;
            }
        }
        exps[n - 1] = rem as u32;
        MultiIndex(exps)
    }
}

impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// Number of monomials in `n` variables of total degree exactly `d`.
pub fn count_exact(n: usize, d: usize) -> usize {
    if n == 0 {
        return usize::from(d == 0);
    }
    binomial(n + d - 1, d)
}

/// Number of monomials in `n` variables of total degree at most `d`.
pub fn count_up_to(n: usize, d: usize) -> usize {
    binomial(n + d, n)
}

/// All monomials of degree `<= d` in graded-lex order.
pub fn monomial_basis(n: usize, d: usize) -> Vec<MultiIndex> {
    let mut out = Vec::with_capacity(count_up_to(n, d));
    for deg in 0..=d {
        let mut cur = vec![0u32; n];
        push_exact(&mut out, &mut cur, 0, deg as u32);
    }
    out
}

fn push_exact(out: &mut Vec<MultiIndex>, cur: &mut Vec<u32>, i: usize, rem: u32) {
    let n = cur.len();
    if i + 1 == n {
        cur[i] = rem;
        out.push(MultiIndex(cur.clone()));
        cur[i] = 0;
        return;
    }
    for e in (0..=rem).rev() {
        cur[i] = e;
        push_exact(out, cur, i + 1, rem - e);
    }
    cur[i] = 0;
}

/// Sparse polynomial in canonical form: no stored coefficient below
/// [`CANONICAL_EPS`] in magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<MultiIndex, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Polynomial {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        Self::monomial(MultiIndex::zero(nvars), c)
    }

    /// The coordinate polynomial `x_{i+1}` (zero-based `i`).
    pub fn var(nvars: usize, i: usize) -> Self {
        Self::monomial(MultiIndex::unit(nvars, i), 1.0)
    }

    pub fn monomial(alpha: MultiIndex, c: f64) -> Self {
        let mut p = Polynomial::zero(alpha.nvars());
        p.add_term(alpha, c);
        p
    }

    pub fn from_terms<I: IntoIterator<Item = (MultiIndex, f64)>>(nvars: usize, terms: I) -> Self {
        let mut p = Polynomial::zero(nvars);
        for (a, c) in terms {
            assert_eq!(a.nvars(), nvars, "monomial dimension mismatch");
            *p.terms.entry(a).or_insert(0.0) += c;
        }
        p.canonicalize();
        p
    }

    /// Builds `sum_i coeffs[i] * basis[i]`.
    pub fn from_coefficients(basis: &[MultiIndex], coeffs: &[f64]) -> Self {
        assert_eq!(basis.len(), coeffs.len());
        let n = basis.first().map_or(0, |a| a.nvars());
        Self::from_terms(n, basis.iter().cloned().zip(coeffs.iter().copied()))
    }

    /// Coefficient vector over the graded-lex basis of degree `<= d`.
    /// Terms of higher degree are ignored.
    pub fn coefficients(&self, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; count_up_to(self.nvars, d)];
        for (a, c) in &self.terms {
            if a.degree() as usize <= d {
                out[a.rank()] = *c;
            }
        }
        out
    }

    fn add_term(&mut self, alpha: MultiIndex, c: f64) {
        let v = self.terms.get(&alpha).copied().unwrap_or(0.0) + c;
        if v.abs() < CANONICAL_EPS {
            self.terms.remove(&alpha);
        } else {
            self.terms.insert(alpha, v);
        }
    }

    fn canonicalize(&mut self) {
        self.terms.retain(|_, c| c.abs() >= CANONICAL_EPS);
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; the zero polynomial has degree 0.
    pub fn degree(&self) -> usize {
        self.terms.keys().map(|a| a.degree() as usize).max().unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, f64)> {
        self.terms.iter().map(|(a, c)| (a, *c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coeff(&self, alpha: &MultiIndex) -> f64 {
        self.terms.get(alpha).copied().unwrap_or(0.0)
    }

    /// Largest monomial in graded-lex order.
    pub fn leading_monomial(&self) -> Option<&MultiIndex> {
        self.terms.keys().next_back()
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    fn check_dim(&self, other: &Polynomial) -> Result<(), PolyError> {
        if self.nvars != other.nvars {
            return Err(PolyError::DimensionMismatch {
                expected: self.nvars,
                got: other.nvars,
            });
        }
        Ok(())
    }

    pub fn checked_add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_dim(other)?;
        let mut out = self.clone();
        for (a, c) in &other.terms {
            *out.terms.entry(a.clone()).or_insert(0.0) += c;
        }
        out.canonicalize();
        Ok(out)
    }

    pub fn checked_sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.checked_add(&other.scale(-1.0))
    }

    pub fn checked_mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_dim(other)?;
        let mut acc: BTreeMap<MultiIndex, f64> = BTreeMap::new();
        for (a, ca) in &self.terms {
            for (b, cb) in &other.terms {
                *acc.entry(a.add(b)).or_insert(0.0) += ca * cb;
            }
        }
        let mut out = Polynomial {
            nvars: self.nvars,
            terms: acc,
        };
        out.canonicalize();
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut out = Polynomial {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(a, c)| (a.clone(), c * s)).collect(),
        };
        out.canonicalize();
        out
    }

    pub fn pow(&self, k: u32) -> Polynomial {
        let mut out = Polynomial::constant(self.nvars, 1.0);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }

    /// Partial derivative with respect to `x_{j+1}`.
    pub fn partial(&self, j: usize) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (a, c) in &self.terms {
            let e = a.0[j];
            if e == 0 {
                continue;
            }
            let mut b = a.clone();
            b.0[j] -= 1;
            *out.terms.entry(b).or_insert(0.0) += c * e as f64;
        }
        out.canonicalize();
        out
    }

    pub fn gradient(&self) -> Vec<Polynomial> {
        (0..self.nvars).map(|j| self.partial(j)).collect()
    }

    /// Directional derivative `grad(self) . field`.
    pub fn lie_derivative(&self, field: &[Polynomial]) -> Result<Polynomial, PolyError> {
        if field.len() != self.nvars {
            return Err(PolyError::DimensionMismatch {
                expected: self.nvars,
                got: field.len(),
            });
        }
        let mut out = Polynomial::zero(self.nvars);
        for (j, fj) in field.iter().enumerate() {
            self.check_dim(fj)?;
            let dj = self.partial(j);
            if dj.is_zero() || fj.is_zero() {
                continue;
            }
            out = &out + &(&dj * fj);
        }
        Ok(out)
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64, PolyError> {
        if x.len() != self.nvars {
            return Err(PolyError::DimensionMismatch {
                expected: self.nvars,
                got: x.len(),
            });
        }
        Ok(self.eval(x))
    }

    /// Unchecked evaluation for hot loops; `x` must have `nvars` entries.
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.nvars);
        let mut s = 0.0;
        for (a, c) in &self.terms {
            let mut t = *c;
            for (xi, &e) in x.iter().zip(&a.0) {
                if e > 0 {
                    t *= xi.powi(e as i32);
                }
            }
            s += t;
        }
        s
    }

    /// Canonical text form, e.g. `1.44 + -1.0 * x1^2 + -1.0 * x2^2`.
    pub fn to_canonical_string(&self) -> String {
        self.to_string()
    }

    /// Parses the canonical text form, or any expression built from numbers,
    /// `x1..xn`, `+ - *`, integer powers `^k` and parentheses.
    pub fn parse(nvars: usize, s: &str) -> Result<Polynomial, PolyError> {
        let mut p = Parser {
            src: s.as_bytes(),
            pos: 0,
            nvars,
        };
        let out = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(out)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (a, c)) in self.terms.iter().enumerate() {
            if k > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{c:?}")?;
            for (j, &e) in a.0.iter().enumerate() {
                match e {
                    0 => {}
                    1 => write!(f, " * x{}", j + 1)?,
                    _ => write!(f, " * x{}^{}", j + 1, e)?,
                }
            }
        }
        Ok(())
    }
}

macro_rules! binop {
    ($tr:ident, $method:ident, $checked:ident) => {
        impl<'a> $tr<&'a Polynomial> for &'a Polynomial {
            type Output = Polynomial;
            /// Panics on dimension mismatch; use the `checked_*` methods to recover.
            fn $method(self, rhs: &'a Polynomial) -> Polynomial {
                self.$checked(rhs).expect("polynomial dimension mismatch")
            }
        }
        impl $tr<Polynomial> for Polynomial {
            type Output = Polynomial;
            fn $method(self, rhs: Polynomial) -> Polynomial {
                (&self).$method(&rhs)
            }
        }
    };
}

binop!(Add, add, checked_add);
binop!(Sub, sub, checked_sub);
binop!(Mul, mul, checked_mul);

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

impl Neg for Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    nvars: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> PolyError {
        PolyError::Parse {
            column: self.pos + 1,
            message: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.term()?;
        while let Some(c) = self.peek() {
            match c {
                b'+' => {
                    self.pos += 1;
                    acc = &acc + &self.term()?;
                }
                b'-' => {
                    self.pos += 1;
                    acc = &acc - &self.term()?;
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.unary()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            acc = &acc * &self.unary()?;
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(-self.unary()?)
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Polynomial, PolyError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(self.error("expected integer exponent"));
            }
            let k: u32 = std::str::from_utf8(&self.src[start..self.pos])
                .unwrap()
                .parse()
                .map_err(|_| self.error("exponent out of range"))?;
            return Ok(base.pow(k));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.error("expected ')'"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(b'x') => {
                let col = self.pos;
                self.pos += 1;
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                let idx: usize = std::str::from_utf8(&self.src[start..self.pos])
                    .unwrap()
                    .parse()
                    .map_err(|_| PolyError::Parse {
                        column: col + 1,
                        message: "expected variable index after 'x'".into(),
                    })?;
                if idx == 0 || idx > self.nvars {
                    return Err(PolyError::Parse {
                        column: col + 1,
                        message: format!("variable x{idx} out of range 1..={}", self.nvars),
                    });
                }
                Ok(Polynomial::var(self.nvars, idx - 1))
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Polynomial, PolyError> {
        let start = self.pos;
        let s = self.src;
        while self.pos < s.len() && (s[self.pos].is_ascii_digit() || s[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < s.len() && (s[self.pos] == b'+' || s[self.pos] == b'-') {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < s.len() && s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if digits == self.pos {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&s[start..self.pos]).unwrap();
        let v: f64 = text.parse().map_err(|_| PolyError::Parse {
            column: start + 1,
            message: format!("invalid number '{text}'"),
        })?;
        Ok(Polynomial::constant(self.nvars, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p2(s: &str) -> Polynomial {
        Polynomial::parse(2, s).unwrap()
    }

    fn mi(e: &[u32]) -> MultiIndex {
        MultiIndex::new(e.to_vec())
    }

    #[test]
    fn basis_small_cases() {
        assert_eq!(monomial_basis(1, 2), vec![mi(&[0]), mi(&[1]), mi(&[2])]);
        assert_eq!(
            monomial_basis(2, 1),
            vec![mi(&[0, 0]), mi(&[1, 0]), mi(&[0, 1])]
        );
    }

    #[test]
    fn basis_count_matches_brute_force() {
        // enumerate every exponent tuple in [0,4]^3 and keep those of degree <= 4
        let mut brute = 0;
        for a in 0..=4 {
            for b in 0..=4 {
                for c in 0..=4 {
                    if a + b + c <= 4 {
                        brute += 1;
                    }
                }
            }
        }
        assert_eq!(brute, 35);
        assert_eq!(monomial_basis(3, 4).len(), brute);
    }

    #[test]
    fn basis_is_sorted_and_ranked() {
        for n in 1..=4 {
            let b = monomial_basis(n, 5);
            for w in b.windows(2) {
                assert!(w[0] < w[1]);
            }
            for (i, a) in b.iter().enumerate() {
                assert_eq!(a.rank(), i);
                assert_eq!(&MultiIndex::unrank(n, i), a);
            }
        }
    }

    #[test]
    fn ring_examples() {
        let a = p2("x1 + x2");
        let b = p2("x1 - x2");
        assert_eq!(&a * &b, p2("x1^2 - x2^2"));
        assert!((&a * &Polynomial::zero(2)).is_zero());
        let c = Polynomial::parse(1, "(1 + x1)^2").unwrap();
        assert_eq!(c, Polynomial::parse(1, "1 + 2*x1 + x1^2").unwrap());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a = Polynomial::var(2, 0);
        let b = Polynomial::var(3, 0);
        assert!(matches!(
            a.checked_mul(&b),
            Err(PolyError::DimensionMismatch { .. })
        ));
        assert!(a.evaluate(&[1.0]).is_err());
        assert!(a.lie_derivative(&[a.clone()]).is_err());
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(p2("x1^2 + x2^2").gradient(), vec![p2("2*x1"), p2("2*x2")]);
        assert_eq!(p2("5").gradient(), vec![p2("0"), p2("0")]);
        assert_eq!(p2("x1^3*x2").gradient(), vec![p2("3*x1^2*x2"), p2("x1^3")]);
    }

    #[test]
    fn lie_derivative_examples() {
        let v = p2("x1^2 + x2^2");
        let field = vec![p2("x2 + 0.1*x1^3"), p2("0")];
        let got = v.lie_derivative(&field).unwrap();
        assert_eq!(got, p2("2*x1*x2 + 0.2*x1^4"));
        assert!(p2("1").lie_derivative(&field).unwrap().is_zero());
        let f = vec![p2("x1*x2 - 3"), p2("x2^3")];
        assert_eq!(p2("x1").lie_derivative(&f).unwrap(), f[0]);
    }

    #[test]
    fn evaluate_examples() {
        assert!((p2("x1^2 + x2^2").evaluate(&[1.2, 0.0]).unwrap() - 1.44).abs() < 1e-15);
        assert_eq!(p2("3 + x1*x2^2").evaluate(&[0.0, 0.0]).unwrap(), 3.0);
        assert_eq!(p2("1.44 - x1^2 - x2^2").eval(&[0.0, 0.0]), 1.44);
    }

    #[test]
    fn canonical_text() {
        let g = p2("1.44 - x1^2 - x2^2");
        assert_eq!(g.to_string(), "1.44 + -1.0 * x1^2 + -1.0 * x2^2");
        assert_eq!(Polynomial::zero(2).to_string(), "0");
        assert_eq!(p2("2*x1*x2^3").to_string(), "2.0 * x1 * x2^3");
    }

    #[test]
    fn parse_errors_carry_columns() {
        match Polynomial::parse(2, "x1 + * x2") {
            Err(PolyError::Parse { column, .. }) => assert_eq!(column, 6),
            other => panic!("{other:?}"),
        }
        assert!(Polynomial::parse(2, "x3").is_err());
        assert!(Polynomial::parse(2, "x1 x2").is_err());
        assert!(Polynomial::parse(2, "(x1").is_err());
        assert_eq!(p2("1e-3*x1"), Polynomial::monomial(mi(&[1, 0]), 1e-3));
    }

    #[test]
    fn tiny_coefficients_are_dropped() {
        let a = p2("x1 + 1e-15");
        assert_eq!(a.num_terms(), 1);
        let b = &p2("x1 + 0.1") - &p2("x1 + 0.1");
        assert!(b.is_zero());
    }

    fn arb_poly(n: usize, deg: u32) -> impl Strategy<Value = Polynomial> {
        let basis = monomial_basis(n, deg as usize);
        let len = basis.len();
        proptest::collection::vec(
            prop_oneof![Just(0.0), -1.0f64..1.0],
            len,
        )
        .prop_map(move |c| Polynomial::from_coefficients(&basis, &c))
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(p in arb_poly(3, 4)) {
            let s = p.to_string();
            prop_assert_eq!(Polynomial::parse(3, &s).unwrap(), p);
        }

        #[test]
        fn multiplication_commutes_and_associates(
            a in arb_poly(2, 3), b in arb_poly(2, 3), c in arb_poly(2, 2)
        ) {
            let ab = &a * &b;
            let ba = &b * &a;
            let scale = 1.0 + ab.max_abs_coeff();
            let diff = &ab - &ba;
            prop_assert!(diff.max_abs_coeff() <= 1e-12 * scale);
            let l = &(&a * &b) * &c;
            let r = &a * &(&b * &c);
            let scale = 1.0 + l.max_abs_coeff();
            prop_assert!((&l - &r).max_abs_coeff() <= 1e-12 * scale);
        }

        #[test]
        fn lie_derivative_matches_finite_difference(
            v in arb_poly(2, 4), f1 in arb_poly(2, 4), f2 in arb_poly(2, 4),
            x in proptest::collection::vec(-0.5f64..0.5, 2)
        ) {
            let field = vec![f1, f2];
            let lv = v.lie_derivative(&field).unwrap().eval(&x);
            let h = 1e-6;
            let fx: Vec<f64> = field.iter().map(|f| f.eval(&x)).collect();
            let xp: Vec<f64> = x.iter().zip(&fx).map(|(a, b)| a + h * b).collect();
            let fd = (v.eval(&xp) - v.eval(&x)) / h;
            prop_assert!((lv - fd).abs() <= 1e-4 * lv.abs().max(1.0), "lv={} fd={}", lv, fd);
        }
    }
}
