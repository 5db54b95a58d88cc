//! Primal-dual conic solver for programs of the form
//!
//! ```text
//! minimize    c'x
//! subject to  A x = b,  x in K
//! ```
//!
//! where `K` is a product of free scalars, nonnegative scalars and PSD
//! blocks, in that order. PSD blocks are stored in `svec` form (see
//! [`linalg::svec`]). The dual is `maximize b'y  s.t.  A'y + z = c, z in K*`.
//!
//! Programs can be written to a plain text dump with one record per line:
//!
//! ```text
//! dims <rows> <cols>
//! cone free <f> nonneg <l> psd <s1> <s2> ...
//! c <col> <value>
//! b <row> <value>
//! A <row> <col> <value>
//! ```
//!
//! Indices are zero-based and only nonzero entries are listed.

mod ipm;
pub mod linalg;

use std::fmt::Write as _;

use thiserror::Error;

pub use ipm::solve;
pub use linalg::{project_psd, smat, svec, svec_index, svec_len, sym_eigen, SymEigen};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("tolerance {0:e} outside [1e-10, 1e-2]")]
    Tolerance(f64),
}

/// Ordered cone product: free block, nonnegative orthant, then PSD blocks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Cone {
    pub free: usize,
    pub nonneg: usize,
    pub psd: Vec<usize>,
}

impl Cone {
    pub fn dim(&self) -> usize {
        self.free + self.nonneg + self.psd.iter().map(|&s| svec_len(s)).sum::<usize>()
    }

    /// Column offset of each PSD block.
    pub fn psd_offsets(&self) -> Vec<usize> {
        let mut off = self.free + self.nonneg;
        self.psd
            .iter()
            .map(|&s| {
                let o = off;
                off += svec_len(s);
                o
            })
            .collect()
    }
}

/// Compressed sparse column matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Duplicate entries are summed; exact zeros are dropped.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut t: Vec<(usize, usize, f64)> = triplets.to_vec();
        t.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut col_ptr = vec![0; ncols + 1];
        let mut row_idx = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut cols = Vec::with_capacity(t.len());
        for (r, c, v) in t {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if let (Some(&lr), Some(&lc)) = (row_idx.last(), cols.last()) {
                if lr == r && lc == c {
                    *vals.last_mut().unwrap() += v;
                    continue;
                }
            }
            row_idx.push(r);
            cols.push(c);
            vals.push(v);
        }
        let mut out_rows = Vec::with_capacity(row_idx.len());
        let mut out_vals = Vec::with_capacity(row_idx.len());
        for k in 0..row_idx.len() {
            if vals[k] != 0.0 {
                col_ptr[cols[k] + 1] += 1;
                out_rows.push(row_idx[k]);
                out_vals.push(vals[k]);
            }
        }
        for c in 0..ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        SparseMatrix {
            nrows,
            ncols,
            col_ptr,
            row_idx: out_rows,
            vals: out_vals,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Entries `(row, value)` of column `j`.
    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                out.push((i, j, v));
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for (j, &xj) in x.iter().enumerate().take(self.ncols) {
            if xj == 0.0 {
                continue;
            }
            for (i, v) in self.col(j) {
                y[i] += v * xj;
            }
        }
        y
    }

    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        (0..self.ncols)
            .map(|j| self.col(j).map(|(i, v)| v * y[i]).sum())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConicProgram {
    pub c: Vec<f64>,
    pub a: SparseMatrix,
    pub b: Vec<f64>,
    pub cone: Cone,
}

impl ConicProgram {
    pub fn new(c: Vec<f64>, a: SparseMatrix, b: Vec<f64>, cone: Cone) -> Result<Self, ConicError> {
        let p = ConicProgram { c, a, b, cone };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ConicError> {
        let n = self.cone.dim();
        if self.c.len() != n || self.a.ncols() != n {
            return Err(ConicError::Malformed(format!(
                "cone has {n} columns, c has {}, A has {}",
                self.c.len(),
                self.a.ncols()
            )));
        }
        if self.b.len() != self.a.nrows() {
            return Err(ConicError::Malformed(format!(
                "A has {} rows, b has {}",
                self.a.nrows(),
                self.b.len()
            )));
        }
        let finite = self.c.iter().chain(&self.b).chain(&self.a.vals).all(|v| v.is_finite());
        if !finite {
            return Err(ConicError::Malformed("non-finite data".into()));
        }
        Ok(())
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    pub fn num_cols(&self) -> usize {
        self.c.len()
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dims {} {}", self.num_rows(), self.num_cols());
        let _ = write!(s, "cone free {} nonneg {} psd", self.cone.free, self.cone.nonneg);
        for b in &self.cone.psd {
            let _ = write!(s, " {b}");
        }
        s.push('\n');
        for (j, v) in self.c.iter().enumerate().filter(|(_, v)| **v != 0.0) {
            let _ = writeln!(s, "c {j} {v:?}");
        }
        for (i, v) in self.b.iter().enumerate().filter(|(_, v)| **v != 0.0) {
            let _ = writeln!(s, "b {i} {v:?}");
        }
        for (i, j, v) in self.a.triplets() {
            let _ = writeln!(s, "A {i} {j} {v:?}");
        }
        s
    }

    pub fn from_dump(text: &str) -> Result<Self, ConicError> {
        let bad = |line: usize, msg: &str| ConicError::Malformed(format!("line {}: {msg}", line + 1));
        let mut dims = None;
        let mut cone = None;
        let mut c = Vec::new();
        let mut b = Vec::new();
        let mut trip = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.is_empty() || tok[0].starts_with('#') {
                continue;
            }
            let num = |k: usize| -> Result<usize, ConicError> {
                tok.get(k).and_then(|t| t.parse().ok()).ok_or_else(|| bad(ln, "expected index"))
            };
            let val = |k: usize| -> Result<f64, ConicError> {
                tok.get(k).and_then(|t| t.parse().ok()).ok_or_else(|| bad(ln, "expected value"))
            };
            match tok[0] {
                "dims" => {
                    let (m, n) = (num(1)?, num(2)?);
                    dims = Some((m, n));
                    c = vec![0.0; n];
                    b = vec![0.0; m];
                }
                "cone" => {
                    if tok.get(1) != Some(&"free") || tok.get(3) != Some(&"nonneg") || tok.get(5) != Some(&"psd") {
                        return Err(bad(ln, "malformed cone line"));
                    }
                    let psd = (6..tok.len()).map(num).collect::<Result<Vec<_>, _>>()?;
                    cone = Some(Cone {
                        free: num(2)?,
                        nonneg: num(4)?,
                        psd,
                    });
                }
                "c" => *c.get_mut(num(1)?).ok_or_else(|| bad(ln, "index out of range"))? = val(2)?,
                "b" => *b.get_mut(num(1)?).ok_or_else(|| bad(ln, "index out of range"))? = val(2)?,
                "A" => trip.push((num(1)?, num(2)?, val(3)?)),
                _ => return Err(bad(ln, "unknown record")),
            }
        }
        let (m, n) = dims.ok_or_else(|| ConicError::Malformed("missing dims".into()))?;
        let cone = cone.ok_or_else(|| ConicError::Malformed("missing cone".into()))?;
        if trip.iter().any(|&(i, j, _)| i >= m || j >= n) {
            return Err(ConicError::Malformed("A entry out of range".into()));
        }
        ConicProgram::new(c, SparseMatrix::from_triplets(m, n, &trip), b, cone)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Optimal,
    /// `dual` holds a ray with `b'y = 1` and `A'y + z = 0`, `z` in `K*`.
    Infeasible,
    /// `primal` holds a ray with `c'x = -1` and `A x = 0`, `x` in `K`.
    Unbounded,
    SlowProgress,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Clone, Debug)]
pub struct ConicSolution {
    pub primal: Vec<f64>,
    pub dual: Vec<f64>,
    pub dual_slack: Vec<f64>,
    pub status: Status,
    pub residuals: Residuals,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Incremental builder that keeps the free / nonnegative / PSD column
/// ordering required by [`ConicProgram`].
#[derive(Clone, Debug, Default)]
pub struct ProgramBuilder {
    nfree: usize,
    nnonneg: usize,
    psd: Vec<usize>,
    rows: usize,
    b: Vec<f64>,
    c_free: Vec<(usize, f64)>,
    c_nonneg: Vec<(usize, f64)>,
    c_psd: Vec<(usize, usize, usize, f64)>,
    a_free: Vec<(usize, usize, f64)>,
    a_nonneg: Vec<(usize, usize, f64)>,
    a_psd: Vec<(usize, usize, usize, usize, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PsdBlock(pub usize);

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index of the first new free variable.
    pub fn add_free(&mut self, count: usize) -> usize {
        let s = self.nfree;
        self.nfree += count;
        s
    }

    pub fn add_nonneg(&mut self, count: usize) -> usize {
        let s = self.nnonneg;
        self.nnonneg += count;
        s
    }

    pub fn add_psd(&mut self, size: usize) -> PsdBlock {
        self.psd.push(size);
        PsdBlock(self.psd.len() - 1)
    }

    pub fn psd_size(&self, blk: PsdBlock) -> usize {
        self.psd[blk.0]
    }

    pub fn add_rows(&mut self, count: usize) -> usize {
        let s = self.rows;
        self.rows += count;
        self.b.resize(self.rows, 0.0);
        s
    }

    pub fn num_rows(&self) -> usize {
        self.rows
    }

    pub fn num_free(&self) -> usize {
        self.nfree
    }

    pub fn set_rhs(&mut self, row: usize, v: f64) {
        self.b[row] = v;
    }

    pub fn add_rhs(&mut self, row: usize, v: f64) {
        self.b[row] += v;
    }

    pub fn rhs(&self, row: usize) -> f64 {
        self.b[row]
    }

    pub fn coef_free(&mut self, row: usize, var: usize, v: f64) {
        self.a_free.push((row, var, v));
    }

    pub fn coef_nonneg(&mut self, row: usize, var: usize, v: f64) {
        self.a_nonneg.push((row, var, v));
    }

    /// Adds `v * (X_ij + X_ji) / 2` (or `v * X_ii`) to the row; coefficients
    /// are given on the symmetric matrix, not on its `svec` packing.
    pub fn coef_psd(&mut self, row: usize, blk: PsdBlock, i: usize, j: usize, v: f64) {
        self.a_psd.push((row, blk.0, i, j, v));
    }

    pub fn cost_free(&mut self, var: usize, v: f64) {
        self.c_free.push((var, v));
    }

    pub fn cost_nonneg(&mut self, var: usize, v: f64) {
        self.c_nonneg.push((var, v));
    }

    pub fn cost_psd(&mut self, blk: PsdBlock, i: usize, j: usize, v: f64) {
        self.c_psd.push((blk.0, i, j, v));
    }

    pub fn cone(&self) -> Cone {
        Cone {
            free: self.nfree,
            nonneg: self.nnonneg,
            psd: self.psd.clone(),
        }
    }

    /// Column of PSD entry `(i, j)` and the factor `svec / X_ij` for that entry.
    pub fn psd_column(&self, blk: PsdBlock, i: usize, j: usize) -> (usize, f64) {
        let offs = self.cone().psd_offsets();
        let s = self.psd[blk.0];
        let scale = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
        (offs[blk.0] + svec_index(s, i, j), scale)
    }

    pub fn build(&self) -> Result<ConicProgram, ConicError> {
        let cone = self.cone();
        let n = cone.dim();
        let offs = cone.psd_offsets();
        let nn0 = self.nfree;
        let col_psd = |blk: usize, i: usize, j: usize| {
            let s = self.psd[blk];
            let scale = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
            (offs[blk] + svec_index(s, i, j), scale)
        };
        let mut c = vec![0.0; n];
        for &(j, v) in &self.c_free {
            c[j] += v;
        }
        for &(j, v) in &self.c_nonneg {
            c[nn0 + j] += v;
        }
        for &(blk, i, j, v) in &self.c_psd {
            let (col, s) = col_psd(blk, i, j);
            c[col] += v / s;
        }
        let mut trip = Vec::with_capacity(self.a_free.len() + self.a_nonneg.len() + self.a_psd.len());
        trip.extend(self.a_free.iter().copied());
        trip.extend(self.a_nonneg.iter().map(|&(r, j, v)| (r, nn0 + j, v)));
        for &(r, blk, i, j, v) in &self.a_psd {
            let (col, s) = col_psd(blk, i, j);
            trip.push((r, col, v / s));
        }
        let a = SparseMatrix::from_triplets(self.rows, n, &trip);
        ConicProgram::new(c, a, self.b.clone(), cone)
    }
}
