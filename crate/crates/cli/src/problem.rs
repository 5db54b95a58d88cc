//! Problem files: a strict TOML schema describing one control problem.

use std::ops::Range;
use std::path::PathBuf;

use roa_core::conic::SolverSettings;
use roa_core::outer::{ControlSystem, InputBox, OuterError};
use roa_core::polyalg::{PolyError, Polynomial};
use roa_core::semisets::SemialgebraicSet;
use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

use crate::artifact::sha256_hex;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("{0}")]
    Toml(String),
    #[error("line {line}, column {column}: {message}")]
    At { line: usize, column: usize, message: String },
    #[error("invalid problem: {0}")]
    Invalid(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    name: String,
    n: usize,
    m: usize,
    f: Vec<Spanned<String>>,
    /// One list of n entries per input channel.
    #[serde(rename = "G")]
    g: Vec<Vec<Spanned<String>>>,
    #[serde(rename = "X")]
    x: Vec<Spanned<String>>,
    #[serde(rename = "X_T")]
    target: Vec<Spanned<String>>,
    u_max: Option<f64>,
    input: Option<RawInput>,
    orders: Orders,
    #[serde(default = "default_beta")]
    beta: f64,
    #[serde(default = "default_beta_vec")]
    beta_vec: Vec<f64>,
    #[serde(default)]
    solver: SolverConfig,
    #[serde(default)]
    verify: VerifyConfig,
    output: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInput {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

fn default_beta() -> f64 {
    1.0
}

fn default_beta_vec() -> Vec<f64> {
    vec![10.0, 1.0, 0.1, 0.01, 0.001]
}

#[derive(Clone, Debug, PartialEq, Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct Orders {
    pub k_outer: usize,
    pub k_inner: usize,
    #[serde(default = "default_deg_u")]
    pub deg_u: usize,
    /// Degree budget of the multiplier terms in the controller projection.
    pub deg_s: Option<usize>,
}

fn default_deg_u() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        SolverConfig {
            tol: s.tol,
            max_iter: s.max_iter,
        }
    }
}

impl SolverConfig {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_max: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            dt: 1e-2,
            t_max: 100.0,
            samples: 500,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct Overrides {
    /// Relaxation order of both the outer and the inner problem.
    pub order: Option<usize>,
    pub beta_vec: Option<Vec<f64>>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        *self == Overrides::default()
    }
}

/// A validated problem.
#[derive(Clone, Debug)]
pub struct Problem {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub f: Vec<Polynomial>,
    pub g: Vec<Vec<Polynomial>>,
    pub x: SemialgebraicSet,
    pub target: SemialgebraicSet,
    pub input: InputBox,
    pub orders: Orders,
    pub beta: f64,
    pub beta_vec: Vec<f64>,
    pub solver: SolverConfig,
    pub verify: VerifyConfig,
    pub output: Option<PathBuf>,
    /// Hash of the source text.
    pub source_hash: String,
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn poly(src: &str, n: usize, s: &Spanned<String>) -> Result<Polynomial, ProblemError> {
    Polynomial::parse(n, s.get_ref()).map_err(|e| {
        let Range { start, .. } = s.span();
        let (column_in, message) = match e {
            PolyError::Parse { column, message } => (column, message),
            other => (1, other.to_string()),
        };
        // the span starts at the opening quote
        let (line, column) = line_col(src, start + column_in);
        ProblemError::At { line, column, message }
    })
}

impl Problem {
    pub fn parse(src: &str) -> Result<Problem, ProblemError> {
        let raw: RawProblem = toml::from_str(src).map_err(|e| match e.span() {
            Some(span) => {
                let (line, column) = line_col(src, span.start);
                ProblemError::At {
                    line,
                    column,
                    message: e.message().to_string(),
                }
            }
            None => ProblemError::Toml(e.to_string()),
        })?;
        let n = raw.n;
        if n == 0 {
            return Err(ProblemError::Invalid("n must be positive".into()));
        }
        if raw.f.len() != n {
            return Err(ProblemError::Invalid(format!("f has {} entries, expected n = {n}", raw.f.len())));
        }
        if raw.g.len() != raw.m || raw.g.iter().any(|c| c.len() != n) {
            return Err(ProblemError::Invalid(format!("G must hold m = {} columns of n = {n} entries", raw.m)));
        }
        let f = raw.f.iter().map(|s| poly(src, n, s)).collect::<Result<Vec<_>, _>>()?;
        let g = raw
            .g
            .iter()
            .map(|c| c.iter().map(|s| poly(src, n, s)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let set = |list: &[Spanned<String>], what: &str| -> Result<SemialgebraicSet, ProblemError> {
            if list.is_empty() {
                return Err(ProblemError::Invalid(format!("{what} needs at least one inequality")));
            }
            let ineqs = list.iter().map(|s| poly(src, n, s)).collect::<Result<Vec<_>, _>>()?;
            Ok(SemialgebraicSet::new(n, ineqs, vec![]))
        };
        let x = set(&raw.x, "X")?;
        let target = set(&raw.target, "X_T")?;
        let input = match (raw.u_max, raw.input) {
            (Some(u), None) => InputBox::canonical(raw.m, u),
            (None, Some(b)) => InputBox { lo: b.lo, hi: b.hi },
            (None, None) if raw.m == 0 => InputBox::canonical(0, 0.0),
            _ => return Err(ProblemError::Invalid("give exactly one of u_max and [input]".into())),
        };
        if input.lo.len() != raw.m || input.hi.len() != raw.m || input.lo.iter().zip(&input.hi).any(|(l, h)| !(l <= h)) {
            return Err(ProblemError::Invalid(format!("input box must have m = {} channels with lo <= hi", raw.m)));
        }
        let p = Problem {
            name: raw.name,
            n,
            m: raw.m,
            f,
            g,
            x,
            target,
            input,
            orders: raw.orders,
            beta: raw.beta,
            beta_vec: raw.beta_vec,
            solver: raw.solver,
            verify: raw.verify,
            output: raw.output,
            source_hash: sha256_hex(src.as_bytes()),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn read(path: &std::path::Path) -> Result<Problem, ProblemError> {
        let src = std::fs::read_to_string(path).map_err(|e| ProblemError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        Problem::parse(&src)
    }

    /// Degree and parameter consistency; run again after command-line
    /// overrides.
    pub fn validate(&self) -> Result<(), ProblemError> {
        let o = &self.orders;
        let set_deg = self.x.max_degree().max(self.target.max_degree());
        let f_deg = self.f.iter().map(|p| p.degree()).max().unwrap_or(0);
        let g_deg = self.g.iter().flatten().map(|p| p.degree()).max().unwrap_or(0);
        let outer_need = set_deg.max(f_deg).max(g_deg);
        if 2 * o.k_outer < outer_need {
            return Err(ProblemError::Invalid(format!("k_outer = {} is too small: degree {outer_need} needs 2 k_outer >= {outer_need}", o.k_outer)));
        }
        if self.m > 0 && o.deg_u > o.k_outer {
            return Err(ProblemError::Invalid(format!("deg_u = {} exceeds k_outer = {}", o.deg_u, o.k_outer)));
        }
        let closed = if self.m > 0 { f_deg.max(g_deg + o.deg_u) } else { f_deg };
        let inner_need = closed.max(set_deg);
        if 2 * o.k_inner < inner_need {
            return Err(ProblemError::Invalid(format!("k_inner = {} is too small: the closed loop has degree {inner_need}", o.k_inner)));
        }
        if let Some(s) = o.deg_s {
            if s % 2 == 1 || s < o.deg_u {
                return Err(ProblemError::Invalid(format!("deg_s = {s} must be even and at least deg_u = {}", o.deg_u)));
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ProblemError::Invalid(format!("beta must be positive, got {}", self.beta)));
        }
        let distinct = self.beta_vec.iter().enumerate().all(|(i, a)| self.beta_vec[..i].iter().all(|b| a != b));
        if self.beta_vec.is_empty() || !distinct || self.beta_vec.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(ProblemError::Invalid(format!("beta_vec must hold distinct positive values, got {:?}", self.beta_vec)));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return Err(ProblemError::Invalid("solver tol and max_iter must be positive".into()));
        }
        let v = &self.verify;
        if !(v.dt > 0.0 && v.t_max >= v.dt) {
            return Err(ProblemError::Invalid(format!("verify needs dt > 0 and T >= dt, got dt = {}, T = {}", v.dt, v.t_max)));
        }
        Ok(())
    }

    /// Applies command-line overrides. The problem hash then covers the
    /// overrides, so artifacts from different settings never chain.
    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<(), ProblemError> {
        if o.is_empty() {
            return Ok(());
        }
        if let Some(k) = o.order {
            self.orders.k_outer = k;
            self.orders.k_inner = k;
        }
        if let Some(b) = &o.beta_vec {
            self.beta_vec = b.clone();
        }
        if let Some(t) = o.tol {
            self.solver.tol = t;
        }
        if let Some(s) = o.seed {
            self.verify.seed = s;
        }
        self.validate()?;
        let tag = serde_json::to_string(o).expect("overrides serialize");
        self.source_hash = sha256_hex(format!("{}{tag}", self.source_hash).as_bytes());
        Ok(())
    }

    pub fn system(&self) -> Result<ControlSystem, OuterError> {
        ControlSystem::with_input_box(self.f.clone(), self.g.clone(), self.x.clone(), self.target.clone(), &self.input, self.beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SRC: &str = r#"name = "line"
n = 1
m = 1
f = ["0"]
G = [["1"]]
X = ["1 + x1", "1 - x1"]
X_T = ["0.1 + x1", "0.1 - x1"]
input = { lo = [-1.0], hi = [1.0] }
orders = { k_outer = 3, k_inner = 3, deg_u = 3 }
"#;

    #[test]
    fn parses_defaults() {
        let p = Problem::parse(SRC).unwrap();
        assert_eq!(p.beta, 1.0);
        assert_eq!(p.beta_vec.len(), 5);
        assert_eq!(p.verify.dt, 1e-2);
        assert_eq!(p.input.u_max(), 2.0);
        assert!(p.x.box_shape().is_some());
    }

    #[test]
    fn polynomial_errors_point_into_the_file() {
        let src = SRC.replace(r#"f = ["0"]"#, r#"f = ["x1 + * 2"]"#);
        match Problem::parse(&src) {
            Err(ProblemError::At { line, column, .. }) => {
                assert_eq!(line, 4);
                // `f = ["` is six characters, the `*` is the sixth of the string
                assert_eq!(column, 12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let src = format!("{SRC}colour = 3\n");
        match Problem::parse(&src) {
            Err(ProblemError::At { line, .. }) => assert_eq!(line, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn degree_consistency() {
        let src = SRC.replace("deg_u = 3", "deg_u = 4");
        assert!(matches!(Problem::parse(&src), Err(ProblemError::Invalid(_))));
        let src = SRC.replace("k_inner = 3", "k_inner = 1");
        assert!(matches!(Problem::parse(&src), Err(ProblemError::Invalid(_))));
        let src = SRC.replace("orders = {", "beta_vec = [1.0, 1.0]\norders = {");
        assert!(matches!(Problem::parse(&src), Err(ProblemError::Invalid(_))));
    }
}
