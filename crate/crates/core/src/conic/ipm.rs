//! Homogeneous self-dual interior-point iteration with Nesterov-Todd scaling
//! and Mehrotra predictor-corrector steps.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use rayon::prelude::*;

use super::linalg::{smat, svec, svec_entry, svec_len, sym_eigen};
use super::{ConicError, ConicProgram, ConicSolution, Residuals, SolverSettings, SparseMatrix, Status};

const STEP_FRACTION: f64 = 0.99;
const RUIZ_PASSES: usize = 15;
const REFINE_STEPS: usize = 4;
/// Largest augmented system factored densely as a whole.
const DENSE_KKT_MAX: usize = 3000;
/// Regularization of the equilibrated augmented system.
const KKT_REG: f64 = 1e-13;

struct Block {
    size: usize,
    off: usize,
    rows: Vec<usize>,
    /// Per touching row: lower-triangle entries `(p, q, a)` of the symmetric
    /// coefficient matrix.
    entries: Vec<Vec<(usize, usize, f64)>>,
}

/// Scaled problem plus the sparsity bookkeeping used by the Newton solves.
struct Scaled {
    m: usize,
    n: usize,
    nf: usize,
    nl: usize,
    a: SparseMatrix,
    b: Vec<f64>,
    c: Vec<f64>,
    blocks: Vec<Block>,
    /// Component and local index of rows touched by some cone column.
    comp_of_row: Vec<Option<(usize, usize)>>,
    comps: Vec<Vec<usize>>,
    /// Rows touched only by free columns.
    free_rows: Vec<usize>,
}

struct BlockScaling {
    r: DMatrix<f64>,
    rinv: DMatrix<f64>,
    g: DMatrix<f64>,
    lam: DVector<f64>,
}

struct NtScaling {
    w: Vec<f64>,
    lam: Vec<f64>,
    blocks: Vec<BlockScaling>,
}

struct Kkt {
    chol: Vec<Cholesky<f64, Dyn>>,
    /// `M^{-1} A_f`, one dense column per free variable.
    w: Vec<DVector<f64>>,
    k2: Option<LU<f64, Dyn, Dyn>>,
    /// LU of the whole augmented system, used instead of the block path
    /// whenever free columns exist and the system is small enough.
    full: Option<(LU<f64, Dyn, Dyn>, Vec<f64>)>,
}

#[derive(Clone)]
struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    tau: f64,
    kappa: f64,
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dz: Vec<f64>,
    dtau: f64,
    dkappa: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Scale factors applied to the original program.
struct Equilibration {
    row: Vec<f64>,
    col: Vec<f64>,
    sb: f64,
    sc: f64,
}

fn equilibrate(prog: &ConicProgram, keep: &[usize]) -> (SparseMatrix, Vec<f64>, Vec<f64>, Equilibration) {
    let m = keep.len();
    let n = prog.num_cols();
    let mut new_row = vec![usize::MAX; prog.num_rows()];
    for (k, &r) in keep.iter().enumerate() {
        new_row[r] = k;
    }
    let trip: Vec<(usize, usize, f64)> = prog
        .a
        .triplets()
        .into_iter()
        .filter(|t| new_row[t.0] != usize::MAX)
        .map(|(i, j, v)| (new_row[i], j, v))
        .collect();
    let cone = &prog.cone;
    // columns sharing a scale factor
    let mut group = vec![0usize; n];
    let mut ngroups = cone.free + cone.nonneg;
    for (j, g) in group.iter_mut().enumerate().take(ngroups) {
        *g = j;
    }
    for (blk, &off) in cone.psd_offsets().iter().enumerate() {
        for g in group.iter_mut().skip(off).take(svec_len(cone.psd[blk])) {
            *g = ngroups;
        }
        ngroups += 1;
    }
    let mut row = vec![1.0; m];
    let mut gscale = vec![1.0; ngroups];
    for _ in 0..RUIZ_PASSES {
        let mut rmax = vec![0.0f64; m];
        let mut gmax = vec![0.0f64; ngroups];
        for &(i, j, v) in &trip {
            let s = (v * row[i] * gscale[group[j]]).abs();
            rmax[i] = rmax[i].max(s);
            gmax[group[j]] = gmax[group[j]].max(s);
        }
        for i in 0..m {
            if rmax[i] > 0.0 {
                row[i] /= rmax[i].sqrt();
            }
        }
        for g in 0..ngroups {
            if gmax[g] > 0.0 {
                gscale[g] /= gmax[g].sqrt();
            }
        }
    }
    let col: Vec<f64> = (0..n).map(|j| gscale[group[j]]).collect();
    let scaled: Vec<(usize, usize, f64)> = trip.iter().map(|&(i, j, v)| (i, j, v * row[i] * col[j])).collect();
    let a = SparseMatrix::from_triplets(m, n, &scaled);
    let mut b: Vec<f64> = keep.iter().enumerate().map(|(k, &r)| prog.b[r] * row[k]).collect();
    let mut c: Vec<f64> = (0..n).map(|j| prog.c[j] * col[j]).collect();
    let bmax = b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cmax = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let sb = 1.0 / bmax.max(1.0);
    let sc = 1.0 / cmax.max(1.0);
    b.iter_mut().for_each(|v| *v *= sb);
    c.iter_mut().for_each(|v| *v *= sc);
    (a, b, c, Equilibration { row, col, sb, sc })
}

impl Scaled {
    fn new(prog: &ConicProgram, a: SparseMatrix, b: Vec<f64>, c: Vec<f64>) -> Self {
        let m = a.nrows();
        let n = a.ncols();
        let nf = prog.cone.free;
        let nl = prog.cone.nonneg;
        let mut parent: Vec<usize> = (0..m).collect();
        let mut touched = vec![false; m];
        for j in nf..nf + nl {
            let rows: Vec<usize> = a.col(j).map(|(i, _)| i).collect();
            for &i in &rows {
                touched[i] = true;
                union(&mut parent, rows[0], i);
            }
        }
        let mut blocks = Vec::new();
        for (bi, &off) in prog.cone.psd_offsets().iter().enumerate() {
            let s = prog.cone.psd[bi];
            let mut local: std::collections::BTreeMap<usize, Vec<(usize, usize, f64)>> = Default::default();
            for k in 0..svec_len(s) {
                let (p, q) = svec_entry(s, k);
                let f = if p == q { 1.0 } else { std::f64::consts::FRAC_1_SQRT_2 };
                for (i, v) in a.col(off + k) {
                    local.entry(i).or_default().push((p, q, v * f));
                }
            }
            let rows: Vec<usize> = local.keys().copied().collect();
            for &i in &rows {
                touched[i] = true;
                union(&mut parent, rows[0], i);
            }
            blocks.push(Block {
                size: s,
                off,
                rows,
                entries: local.into_values().collect(),
            });
        }
        let mut comp_id = vec![usize::MAX; m];
        let mut comps: Vec<Vec<usize>> = Vec::new();
        let mut comp_of_row = vec![None; m];
        let mut free_rows = Vec::new();
        for i in 0..m {
            if !touched[i] {
                free_rows.push(i);
                continue;
            }
            let r = find(&mut parent, i);
            if comp_id[r] == usize::MAX {
                comp_id[r] = comps.len();
                comps.push(Vec::new());
            }
            let cid = comp_id[r];
            comp_of_row[i] = Some((cid, comps[cid].len()));
            comps[cid].push(i);
        }
        Scaled {
            m,
            n,
            nf,
            nl,
            a,
            b,
            c,
            blocks,
            comp_of_row,
            comps,
            free_rows,
        }
    }

    fn block_mat(&self, v: &[f64], bi: usize) -> DMatrix<f64> {
        let blk = &self.blocks[bi];
        smat(&v[blk.off..blk.off + svec_len(blk.size)], blk.size)
    }

    fn nu(&self) -> f64 {
        (self.nl + self.blocks.iter().map(|b| b.size).sum::<usize>()) as f64
    }

    fn initial(&self) -> Iterate {
        let mut x = vec![0.0; self.n];
        for v in x.iter_mut().skip(self.nf).take(self.nl) {
            *v = 1.0;
        }
        for blk in &self.blocks {
            for i in 0..blk.size {
                x[blk.off + super::svec_index(blk.size, i, i)] = 1.0;
            }
        }
        let z = {
            let mut z = x.clone();
            z.iter_mut().take(self.nf).for_each(|v| *v = 0.0);
            z
        };
        Iterate {
            x,
            y: vec![0.0; self.m],
            z,
            tau: 1.0,
            kappa: 1.0,
        }
    }

    fn mu(&self, it: &Iterate) -> f64 {
        let s: f64 = dot(&it.x[self.nf..], &it.z[self.nf..]);
        (s + it.tau * it.kappa) / (self.nu() + 1.0)
    }

    fn nt_scaling(&self, it: &Iterate) -> Option<NtScaling> {
        let mut w = Vec::with_capacity(self.nl);
        let mut lam = Vec::with_capacity(self.nl);
        for j in self.nf..self.nf + self.nl {
            let (x, z) = (it.x[j], it.z[j]);
            if x <= 0.0 || z <= 0.0 {
                return None;
            }
            w.push((x / z).sqrt());
            lam.push((x * z).sqrt());
        }
        let blocks: Option<Vec<BlockScaling>> = (0..self.blocks.len())
            .into_par_iter()
            .map(|bi| {
                let xm = self.block_mat(&it.x, bi);
                let zm = self.block_mat(&it.z, bi);
                let lx = Cholesky::new(xm)?.l();
                let lz = Cholesky::new(zm)?.l();
                let svd = (lz.transpose() * &lx).svd(true, true);
                let v = svd.v_t?.transpose();
                let sig = svd.singular_values;
                if sig.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
                    return None;
                }
                let s = sig.len();
                let inv_sqrt = DMatrix::from_diagonal(&sig.map(|v| 1.0 / v.sqrt()));
                let sqrt = DMatrix::from_diagonal(&sig.map(|v| v.sqrt()));
                let r = &lx * &v * inv_sqrt;
                let lx_inv = lx.solve_lower_triangular(&DMatrix::identity(s, s))?;
                let rinv = sqrt * v.transpose() * lx_inv;
                let g = &r * r.transpose();
                Some(BlockScaling { r, rinv, g, lam: sig })
            })
            .collect();
        Some(NtScaling {
            w,
            lam,
            blocks: blocks?,
        })
    }

    /// Applies `H^{-1}` to the cone part of `v`; the free part is zeroed.
    fn hinv(&self, sc: &NtScaling, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for k in 0..self.nl {
            let j = self.nf + k;
            out[j] = sc.w[k] * sc.w[k] * v[j];
        }
        for (bi, blk) in self.blocks.iter().enumerate() {
            let vm = self.block_mat(v, bi);
            let g = &sc.blocks[bi].g;
            let r = g * vm * g;
            out[blk.off..blk.off + svec_len(blk.size)].copy_from_slice(&svec(&r));
        }
        out
    }

    fn cone_only(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        out.iter_mut().take(self.nf).for_each(|x| *x = 0.0);
        out
    }

    fn factor(&self, sc: &NtScaling) -> Option<Kkt> {
        let mut mcomp: Vec<DMatrix<f64>> = self.comps.iter().map(|r| DMatrix::zeros(r.len(), r.len())).collect();
        for k in 0..self.nl {
            let j = self.nf + k;
            let d = sc.w[k] * sc.w[k];
            let entries: Vec<(usize, f64)> = self.a.col(j).collect();
            for &(i1, v1) in &entries {
                let (c, l1) = self.comp_of_row[i1].unwrap();
                for &(i2, v2) in &entries {
                    let (_, l2) = self.comp_of_row[i2].unwrap();
                    mcomp[c][(l1, l2)] += v1 * v2 * d;
                }
            }
        }
        let contrib: Vec<DMatrix<f64>> = self
            .blocks
            .par_iter()
            .enumerate()
            .map(|(bi, blk)| block_schur(blk, &sc.blocks[bi].g))
            .collect();
        for (blk, local) in self.blocks.iter().zip(contrib) {
            for (a, &ra) in blk.rows.iter().enumerate() {
                let (c, la) = self.comp_of_row[ra].unwrap();
                for (b, &rb) in blk.rows.iter().enumerate() {
                    let (_, lb) = self.comp_of_row[rb].unwrap();
                    mcomp[c][(la, lb)] += local[(a, b)];
                }
            }
        }
        if self.nf > 0 && self.m + self.nf <= DENSE_KKT_MAX {
            return Some(self.factor_full(mcomp));
        }
        let mut chol = Vec::with_capacity(mcomp.len());
        for mc in &mcomp {
            let scale = (0..mc.nrows()).fold(1e-300f64, |a, i| a.max(mc[(i, i)]));
            let mut delta = 1e-14 * scale;
            let mut done = None;
            for _ in 0..12 {
                let mut reg = mc.clone();
                for i in 0..reg.nrows() {
                    reg[(i, i)] += delta;
                }
                if let Some(ch) = Cholesky::new(reg) {
                    done = Some(ch);
                    break;
                }
                delta *= 100.0;
            }
            chol.push(done?);
        }
        let mut kkt = Kkt {
            chol,
            w: Vec::new(),
            k2: None,
            full: None,
        };
        let nfr = self.free_rows.len();
        let dim2 = self.nf + nfr;
        if dim2 > 0 {
            kkt.w = (0..self.nf)
                .map(|j| {
                    let mut col = vec![0.0; self.m];
                    for (i, v) in self.a.col(j) {
                        if self.comp_of_row[i].is_some() {
                            col[i] = v;
                        }
                    }
                    DVector::from_vec(self.minv(&kkt, &col))
                })
                .collect();
            let mut k2 = DMatrix::zeros(dim2, dim2);
            let mut fpos = vec![usize::MAX; self.m];
            for (k, &r) in self.free_rows.iter().enumerate() {
                fpos[r] = k;
            }
            let mut scale = 1e-300f64;
            for j1 in 0..self.nf {
                for j2 in 0..self.nf {
                    let s: f64 = self.a.col(j1).map(|(i, v)| v * kkt.w[j2][i]).sum();
                    k2[(j1, j2)] = -s;
                }
                scale = scale.max(k2[(j1, j1)].abs());
                for (i, v) in self.a.col(j1) {
                    if fpos[i] != usize::MAX {
                        k2[(j1, self.nf + fpos[i])] = v;
                        k2[(self.nf + fpos[i], j1)] = v;
                    }
                }
            }
            let delta = 1e-13 * scale.max(1.0);
            for j in 0..self.nf {
                k2[(j, j)] -= delta;
            }
            for k in 0..nfr {
                k2[(self.nf + k, self.nf + k)] += delta;
            }
            kkt.k2 = Some(LU::new(k2));
        }
        Some(kkt)
    }

    fn factor_full(&self, mcomp: Vec<DMatrix<f64>>) -> Kkt {
        let dim = self.m + self.nf;
        let mut k = DMatrix::zeros(dim, dim);
        for (c, rows) in self.comps.iter().enumerate() {
            for (a, &ra) in rows.iter().enumerate() {
                for (b, &rb) in rows.iter().enumerate() {
                    k[(ra, rb)] = mcomp[c][(a, b)];
                }
            }
        }
        for j in 0..self.nf {
            for (i, v) in self.a.col(j) {
                k[(i, self.m + j)] = v;
                k[(self.m + j, i)] = v;
            }
        }
        // symmetric Ruiz scaling so that the regularization is uniform
        let mut d = vec![1.0; dim];
        for _ in 0..10 {
            let r: Vec<f64> = (0..dim)
                .map(|i| {
                    let mx = k.row(i).amax();
                    if mx > 0.0 {
                        1.0 / mx.sqrt()
                    } else {
                        1.0
                    }
                })
                .collect();
            for j in 0..dim {
                for i in 0..dim {
                    k[(i, j)] *= r[i] * r[j];
                }
            }
            d.iter_mut().zip(&r).for_each(|(a, b)| *a *= b);
        }
        for i in 0..self.m {
            k[(i, i)] += KKT_REG;
        }
        for j in 0..self.nf {
            k[(self.m + j, self.m + j)] -= KKT_REG;
        }
        Kkt {
            chol: Vec::new(),
            w: Vec::new(),
            k2: None,
            full: Some((LU::new(k), d)),
        }
    }

    /// Regularized `M^{-1}` on the cone-touched rows; free-only rows map to 0.
    fn minv(&self, kkt: &Kkt, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (c, rows) in self.comps.iter().enumerate() {
            let rhs = DVector::from_iterator(rows.len(), rows.iter().map(|&i| r[i]));
            let sol = kkt.chol[c].solve(&rhs);
            for (k, &i) in rows.iter().enumerate() {
                out[i] = sol[k];
            }
        }
        out
    }

    fn base_solve(&self, kkt: &Kkt, ry: &[f64], rf: &[f64]) -> (Vec<f64>, Vec<f64>) {
        if let Some((lu, d)) = &kkt.full {
            let rhs = DVector::from_iterator(self.m + self.nf, ry.iter().chain(rf).zip(d).map(|(v, s)| v * s));
            let sol = lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(self.m + self.nf));
            let sol: Vec<f64> = sol.iter().zip(d).map(|(v, s)| v * s).collect();
            return (sol[..self.m].to_vec(), sol[self.m..].to_vec());
        }
        let t = self.minv(kkt, ry);
        let mut dy = t.clone();
        let mut dxf = vec![0.0; self.nf];
        if let Some(lu) = &kkt.k2 {
            let nfr = self.free_rows.len();
            let mut rhs = DVector::zeros(self.nf + nfr);
            for j in 0..self.nf {
                let s: f64 = self.a.col(j).map(|(i, v)| v * t[i]).sum();
                rhs[j] = rf[j] - s;
            }
            for (k, &r) in self.free_rows.iter().enumerate() {
                rhs[self.nf + k] = ry[r];
            }
            let sol = lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(self.nf + nfr));
            for j in 0..self.nf {
                dxf[j] = sol[j];
                for i in 0..self.m {
                    dy[i] -= kkt.w[j][i] * sol[j];
                }
            }
            for (k, &r) in self.free_rows.iter().enumerate() {
                dy[r] = sol[self.nf + k];
            }
        }
        (dy, dxf)
    }

    /// Solves `[M A_f; A_f' 0] [dy; dxf] = [ry; rf]` with iterative refinement.
    fn kkt_solve(&self, sc: &NtScaling, kkt: &Kkt, ry: &[f64], rf: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (mut dy, mut dxf) = self.base_solve(kkt, ry, rf);
        let rhs_norm = norm(ry).max(norm(rf)).max(1e-300);
        for _ in 0..REFINE_STEPS {
            let mut ey = self.a.mul_vec(&self.hinv(sc, &self.a.tr_mul_vec(&dy)));
            let mut full = vec![0.0; self.n];
            full[..self.nf].copy_from_slice(&dxf);
            let afx = self.a.mul_vec(&full);
            for i in 0..self.m {
                ey[i] = ry[i] - ey[i] - afx[i];
            }
            let aty = self.a.tr_mul_vec(&dy);
            let ef: Vec<f64> = (0..self.nf).map(|j| rf[j] - aty[j]).collect();
            if norm(&ey).max(norm(&ef)) <= 1e-15 * rhs_norm {
                break;
            }
            let (cy, cx) = self.base_solve(kkt, &ey, &ef);
            dy.iter_mut().zip(&cy).for_each(|(a, b)| *a += b);
            dxf.iter_mut().zip(&cx).for_each(|(a, b)| *a += b);
        }
        (dy, dxf)
    }

    /// Scaled-space images `(R^{-1} dX R^{-T}, R' dZ R)` for each PSD block and
    /// `(dx / w, w dz)` for the orthant.
    fn scaled_pair(&self, sc: &NtScaling, dx: &[f64], dz: &[f64]) -> (Vec<(f64, f64)>, Vec<(DMatrix<f64>, DMatrix<f64>)>) {
        let lin = (0..self.nl)
            .map(|k| {
                let j = self.nf + k;
                (dx[j] / sc.w[k], dz[j] * sc.w[k])
            })
            .collect();
        let mats = (0..self.blocks.len())
            .map(|bi| {
                let bs = &sc.blocks[bi];
                let xs = &bs.rinv * self.block_mat(dx, bi) * bs.rinv.transpose();
                let zs = bs.r.transpose() * self.block_mat(dz, bi) * &bs.r;
                (xs, zs)
            })
            .collect();
        (lin, mats)
    }

    /// `H^{-1} q` for the complementarity right-hand side
    /// `lambda o lambda + corr - sigma mu e`.
    fn hinv_q(&self, sc: &NtScaling, corr: Option<(&[(f64, f64)], &[(DMatrix<f64>, DMatrix<f64>)])>, smu: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for k in 0..self.nl {
            let l = sc.lam[k];
            let mut d = l * l - smu;
            if let Some((lin, _)) = corr {
                d += lin[k].0 * lin[k].1;
            }
            out[self.nf + k] = sc.w[k] * d / l;
        }
        for (bi, blk) in self.blocks.iter().enumerate() {
            let bs = &sc.blocks[bi];
            let s = blk.size;
            let mut d = DMatrix::from_diagonal(&bs.lam.map(|l| l * l));
            for i in 0..s {
                d[(i, i)] -= smu;
            }
            if let Some((_, mats)) = corr {
                let (xs, zs) = &mats[bi];
                let p = xs * zs;
                d += (&p + p.transpose()) * 0.5;
            }
            let u = DMatrix::from_fn(s, s, |i, j| 2.0 * d[(i, j)] / (bs.lam[i] + bs.lam[j]));
            let h = &bs.r * u * bs.r.transpose();
            out[blk.off..blk.off + svec_len(s)].copy_from_slice(&svec(&h));
        }
        out
    }

    fn max_step(&self, sc: &NtScaling, it: &Iterate, d: &Direction) -> f64 {
        let mut alpha = f64::INFINITY;
        let mut limit = |v: f64, dv: f64| {
            if dv < 0.0 {
                alpha = alpha.min(-v / dv);
            }
        };
        limit(it.tau, d.dtau);
        limit(it.kappa, d.dkappa);
        for j in self.nf..self.nf + self.nl {
            limit(it.x[j], d.dx[j]);
            limit(it.z[j], d.dz[j]);
        }
        let (_, mats) = self.scaled_pair(sc, &d.dx, &d.dz);
        let psd_limits: Vec<f64> = mats
            .par_iter()
            .enumerate()
            .map(|(bi, (xs, zs))| {
                let lam = &sc.blocks[bi].lam;
                let s = lam.len();
                let mut a = f64::INFINITY;
                for m in [xs, zs] {
                    let t = DMatrix::from_fn(s, s, |i, j| m[(i, j)] / (lam[i] * lam[j]).sqrt());
                    let t = (&t + t.transpose()) * 0.5;
                    let mn = sym_eigen(&t).values[0];
                    if mn < 0.0 {
                        a = a.min(-1.0 / mn);
                    }
                }
                a
            })
            .collect();
        psd_limits.into_iter().fold(alpha, f64::min)
    }

    fn direction(&self, sc: &NtScaling, kkt: &Kkt, it: &Iterate, sol2: &(Vec<f64>, Vec<f64>, Vec<f64>), eta: f64, hq: &[f64], dkappa_rhs: f64) -> Direction {
        let (dy2, dx2, _) = sol2;
        let ax = self.a.mul_vec(&it.x);
        let rp: Vec<f64> = (0..self.m).map(|i| ax[i] - self.b[i] * it.tau).collect();
        let aty = self.a.tr_mul_vec(&it.y);
        let rd: Vec<f64> = (0..self.n).map(|j| -aty[j] - it.z[j] + self.c[j] * it.tau).collect();
        let rg = dot(&self.b, &it.y) - dot(&self.c, &it.x) - it.kappa;

        let rdc: Vec<f64> = self.cone_only(&rd).iter().map(|v| eta * v).collect();
        let hrd = self.hinv(sc, &rdc);
        let inner: Vec<f64> = hrd.iter().zip(hq).map(|(a, b)| a + b).collect();
        let ahi = self.a.mul_vec(&inner);
        let ry: Vec<f64> = (0..self.m).map(|i| -eta * rp[i] + ahi[i]).collect();
        let rf: Vec<f64> = (0..self.nf).map(|j| eta * rd[j]).collect();
        let (dy1, dxf1) = self.kkt_solve(sc, kkt, &ry, &rf);
        let aty1 = self.a.tr_mul_vec(&dy1);
        let t: Vec<f64> = self.cone_only(&aty1).iter().zip(&rdc).map(|(a, b)| a - b).collect();
        let mut dx1 = self.hinv(sc, &t);
        dx1.iter_mut().zip(hq).for_each(|(a, b)| *a -= b);
        dx1[..self.nf].copy_from_slice(&dxf1);

        let num = -eta * rg - dot(&self.b, &dy1) + dot(&self.c, &dx1) - dkappa_rhs / it.tau;
        let den = dot(&self.b, dy2) - dot(&self.c, dx2) + it.kappa / it.tau;
        let dtau = num / den;
        let dy: Vec<f64> = dy1.iter().zip(dy2).map(|(a, b)| a + dtau * b).collect();
        let dx: Vec<f64> = dx1.iter().zip(dx2).map(|(a, b)| a + dtau * b).collect();
        let atdy = self.a.tr_mul_vec(&dy);
        let mut dz: Vec<f64> = (0..self.n).map(|j| -atdy[j] + self.c[j] * dtau + eta * rd[j]).collect();
        dz.iter_mut().take(self.nf).for_each(|v| *v = 0.0);
        let dkappa = (-dkappa_rhs - it.kappa * dtau) / it.tau;
        Direction {
            dx,
            dy,
            dz,
            dtau,
            dkappa,
        }
    }
}

/// Dense contribution `<A_r, G A_s G>` of one PSD block, indexed by the
/// block's row list.
fn block_schur(blk: &Block, g: &DMatrix<f64>) -> DMatrix<f64> {
    let s = blk.size;
    let nr = blk.rows.len();
    let mut out = DMatrix::zeros(nr, nr);
    let mut t = DMatrix::zeros(s, s);
    for a in 0..nr {
        t.fill(0.0);
        for &(p, q, v) in &blk.entries[a] {
            for jj in 0..s {
                let gq = g[(q, jj)] * v;
                let gp = g[(p, jj)] * v;
                for ii in 0..s {
                    t[(ii, jj)] += g[(ii, p)] * gq;
                    if p != q {
                        t[(ii, jj)] += g[(ii, q)] * gp;
                    }
                }
            }
        }
        for b in a..nr {
            let mut acc = 0.0;
            for &(p, q, v) in &blk.entries[b] {
                acc += if p == q { v * t[(p, q)] } else { 2.0 * v * t[(p, q)] };
            }
            out[(a, b)] = acc;
            out[(b, a)] = acc;
        }
    }
    out
}

struct Unscaled {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
}

fn unscale(prog: &ConicProgram, keep: &[usize], eq: &Equilibration, x: &[f64], y: &[f64], z: &[f64], div: f64) -> Unscaled {
    let xo: Vec<f64> = x.iter().zip(&eq.col).map(|(v, s)| v * s / eq.sb / div).collect();
    let zo: Vec<f64> = z.iter().zip(&eq.col).map(|(v, s)| v / s / eq.sc / div).collect();
    let mut yo = vec![0.0; prog.num_rows()];
    for (k, &r) in keep.iter().enumerate() {
        yo[r] = y[k] * eq.row[k] / eq.sc / div;
    }
    Unscaled { x: xo, y: yo, z: zo }
}

fn residuals(prog: &ConicProgram, u: &Unscaled) -> (Residuals, f64, f64) {
    let ax = prog.a.mul_vec(&u.x);
    let rp: Vec<f64> = ax.iter().zip(&prog.b).map(|(a, b)| a - b).collect();
    let aty = prog.a.tr_mul_vec(&u.y);
    let rd: Vec<f64> = (0..prog.num_cols()).map(|j| aty[j] + u.z[j] - prog.c[j]).collect();
    let pobj = dot(&prog.c, &u.x);
    let dobj = dot(&prog.b, &u.y);
    (
        Residuals {
            primal: norm(&rp) / (1.0 + norm(&prog.b)),
            dual: norm(&rd) / (1.0 + norm(&prog.c)),
            gap: (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs()),
        },
        pobj,
        dobj,
    )
}

/// Solves `prog` to relative accuracy `settings.tol`.
///
/// Non-convergence and infeasibility are reported through
/// [`ConicSolution::status`]; errors are reserved for malformed input.
pub fn solve(prog: &ConicProgram, settings: &SolverSettings) -> Result<ConicSolution, ConicError> {
    prog.validate()?;
    let tol = settings.tol;
    if !(1e-10..=1e-2).contains(&tol) {
        return Err(ConicError::Tolerance(tol));
    }
    let mut row_nnz = vec![0usize; prog.num_rows()];
    for (i, _, _) in prog.a.triplets() {
        row_nnz[i] += 1;
    }
    for (i, &cnt) in row_nnz.iter().enumerate() {
        if cnt == 0 && prog.b[i] != 0.0 {
            let mut y = vec![0.0; prog.num_rows()];
            y[i] = 1.0 / prog.b[i];
            return Ok(ConicSolution {
                primal: vec![0.0; prog.num_cols()],
                dual: y,
                dual_slack: vec![0.0; prog.num_cols()],
                status: Status::Infeasible,
                residuals: Residuals::default(),
                primal_objective: f64::INFINITY,
                dual_objective: f64::INFINITY,
                iterations: 0,
            });
        }
    }
    let keep: Vec<usize> = (0..prog.num_rows()).filter(|&i| row_nnz[i] > 0).collect();
    let (a, b, c, eq) = equilibrate(prog, &keep);
    let sp = Scaled::new(prog, a, b, c);
    let mut it = sp.initial();

    let finish = |it: &Iterate, status: Status, iters: usize| -> ConicSolution {
        let u = unscale(prog, &keep, &eq, &it.x, &it.y, &it.z, it.tau);
        let (res, pobj, dobj) = residuals(prog, &u);
        ConicSolution {
            primal: u.x,
            dual: u.y,
            dual_slack: u.z,
            status,
            residuals: res,
            primal_objective: pobj,
            dual_objective: dobj,
            iterations: iters,
        }
    };

    // Late iterations can lose primal accuracy once the normal equations
    // become ill-conditioned, so the most accurate iterate is kept.
    let mut best: Option<(f64, Iterate, usize)> = None;
    for iter in 0..settings.max_iter {
        let u = unscale(prog, &keep, &eq, &it.x, &it.y, &it.z, it.tau);
        let (res, _, _) = residuals(prog, &u);
        if res.primal <= tol && res.dual <= tol && res.gap <= tol {
            return Ok(finish(&it, Status::Optimal, iter));
        }
        let worst = res.primal.max(res.dual).max(res.gap);
        if best.as_ref().is_none_or(|(w, _, _)| worst < *w) {
            best = Some((worst, it.clone(), iter));
        }
        let stall = |best: &Option<(f64, Iterate, usize)>| {
            let (_, b, i) = best.as_ref().expect("recorded above");
            finish(b, Status::SlowProgress, *i)
        };
        if let Some(sol) = certificate(prog, &keep, &eq, &it, tol, iter) {
            return Ok(sol);
        }

        let Some(sc) = sp.nt_scaling(&it) else {
            return Ok(stall(&best));
        };
        let Some(kkt) = sp.factor(&sc) else {
            return Ok(stall(&best));
        };
        let mu = sp.mu(&it);

        let hc = sp.hinv(&sc, &sp.cone_only(&sp.c));
        let ahc = sp.a.mul_vec(&hc);
        let ry2: Vec<f64> = (0..sp.m).map(|i| sp.b[i] + ahc[i]).collect();
        let rf2: Vec<f64> = sp.c[..sp.nf].to_vec();
        let (dy2, dxf2) = sp.kkt_solve(&sc, &kkt, &ry2, &rf2);
        let aty2 = sp.a.tr_mul_vec(&dy2);
        let t: Vec<f64> = sp.cone_only(&aty2).iter().zip(&sp.cone_only(&sp.c)).map(|(a, b)| a - b).collect();
        let mut dx2 = sp.hinv(&sc, &t);
        dx2[..sp.nf].copy_from_slice(&dxf2);
        let sol2 = (dy2, dx2, Vec::new());

        let hq_aff = sp.hinv_q(&sc, None, 0.0);
        let aff = sp.direction(&sc, &kkt, &it, &sol2, 1.0, &hq_aff, it.tau * it.kappa);
        let alpha_aff = sp.max_step(&sc, &it, &aff).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

        let (lin, mats) = sp.scaled_pair(&sc, &aff.dx, &aff.dz);
        let hq = sp.hinv_q(&sc, Some((&lin, &mats)), sigma * mu);
        let dk = it.tau * it.kappa + aff.dtau * aff.dkappa - sigma * mu;
        let dir = sp.direction(&sc, &kkt, &it, &sol2, 1.0 - sigma, &hq, dk);
        let alpha = (STEP_FRACTION * sp.max_step(&sc, &it, &dir)).min(1.0);
        if !alpha.is_finite() || alpha < 1e-12 || dir.dx.iter().any(|v| !v.is_finite()) {
            return Ok(stall(&best));
        }
        for (a, d) in it.x.iter_mut().zip(&dir.dx) {
            *a += alpha * d;
        }
        for (a, d) in it.y.iter_mut().zip(&dir.dy) {
            *a += alpha * d;
        }
        for (a, d) in it.z.iter_mut().zip(&dir.dz) {
            *a += alpha * d;
        }
        it.tau += alpha * dir.dtau;
        it.kappa += alpha * dir.dkappa;
    }
    let u = unscale(prog, &keep, &eq, &it.x, &it.y, &it.z, it.tau);
    let (res, _, _) = residuals(prog, &u);
    if res.primal <= tol && res.dual <= tol && res.gap <= tol {
        return Ok(finish(&it, Status::Optimal, settings.max_iter));
    }
    match best {
        Some((w, b, i)) if w < res.primal.max(res.dual).max(res.gap) => Ok(finish(&b, Status::SlowProgress, i)),
        _ => Ok(finish(&it, Status::SlowProgress, settings.max_iter)),
    }
}

fn certificate(prog: &ConicProgram, keep: &[usize], eq: &Equilibration, it: &Iterate, tol: f64, iter: usize) -> Option<ConicSolution> {
    let u = unscale(prog, keep, eq, &it.x, &it.y, &it.z, 1.0);
    let by = dot(&prog.b, &u.y);
    if by > 0.0 {
        let aty = prog.a.tr_mul_vec(&u.y);
        let r: Vec<f64> = aty.iter().zip(&u.z).map(|(a, z)| a + z).collect();
        if norm(&r) <= tol * by {
            return Some(ConicSolution {
                primal: u.x,
                dual: u.y.iter().map(|v| v / by).collect(),
                dual_slack: u.z.iter().map(|v| v / by).collect(),
                status: Status::Infeasible,
                residuals: Residuals::default(),
                primal_objective: f64::INFINITY,
                dual_objective: f64::INFINITY,
                iterations: iter,
            });
        }
    }
    let cx = dot(&prog.c, &u.x);
    if cx < 0.0 {
        let ax = prog.a.mul_vec(&u.x);
        if norm(&ax) <= tol * (-cx) {
            return Some(ConicSolution {
                primal: u.x.iter().map(|v| v / -cx).collect(),
                dual: u.y,
                dual_slack: u.z,
                status: Status::Unbounded,
                residuals: Residuals::default(),
                primal_objective: f64::NEG_INFINITY,
                dual_objective: f64::NEG_INFINITY,
                iterations: iter,
            });
        }
    }
    None
}
