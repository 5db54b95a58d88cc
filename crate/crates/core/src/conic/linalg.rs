//! Dense symmetric kernels: eigendecomposition, PSD projection and the
//! `svec` packing of symmetric blocks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::ConicError;

/// Blocks up to this size use cyclic Jacobi; larger ones use Householder
/// tridiagonalization followed by implicit QR.
pub const JACOBI_MAX: usize = 64;

/// Eigenvalues in ascending order with matching eigenvector columns.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&self.values);
        &self.vectors * d * self.vectors.transpose()
    }
}

pub fn sym_eigen(s: &DMatrix<f64>) -> SymEigen {
    let mut e = if s.nrows() <= JACOBI_MAX {
        jacobi_eigen(s)
    } else {
        let se = SymmetricEigen::new(s.clone());
        SymEigen {
            values: se.eigenvalues,
            vectors: se.eigenvectors,
        }
    };
    sort_ascending(&mut e);
    e
}

fn sort_ascending(e: &mut SymEigen) {
    let n = e.values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| e.values[a].total_cmp(&e.values[b]));
    let values = DVector::from_iterator(n, idx.iter().map(|&i| e.values[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in idx.iter().enumerate() {
        vectors.set_column(k, &e.vectors.column(i));
    }
    e.values = values;
    e.vectors = vectors;
}

/// Cyclic Jacobi rotations on a copy of `s` (only the lower triangle is read).
pub fn jacobi_eigen(s: &DMatrix<f64>) -> SymEigen {
    let n = s.nrows();
    let mut a = DMatrix::from_fn(n, n, |i, j| if i >= j { s[(i, j)] } else { s[(j, i)] });
    let mut v = DMatrix::identity(n, n);
    let norm = a.norm();
    if norm == 0.0 {
        return SymEigen {
            values: DVector::zeros(n),
            vectors: v,
        };
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..i {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-16 * norm {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    SymEigen {
        values: a.diagonal(),
        vectors: v,
    }
}

pub fn check_symmetric(s: &DMatrix<f64>) -> Result<(), ConicError> {
    if s.nrows() != s.ncols() {
        return Err(ConicError::NotSymmetric { asymmetry: f64::INFINITY });
    }
    let scale = 1.0f64.max(s.amax());
    let asym = (s - s.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(ConicError::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Nearest positive semidefinite matrix in Frobenius norm.
pub fn project_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>, ConicError> {
    check_symmetric(s)?;
    let sym = (s + s.transpose()) * 0.5;
    let mut e = sym_eigen(&sym);
    e.values.iter_mut().for_each(|l| *l = l.max(0.0));
    let out = e.reconstruct();
    Ok((&out + out.transpose()) * 0.5)
}

/// Length of the `svec` packing of an `s x s` symmetric matrix.
pub fn svec_len(s: usize) -> usize {
    s * (s + 1) / 2
}

/// Position of entry `(i, j)` in `svec` (column-major lower triangle).
pub fn svec_index(s: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    j * s - j * (j + 1) / 2 + i
}

/// Inverse of [`svec_index`].
pub fn svec_entry(s: usize, k: usize) -> (usize, usize) {
    let mut j = 0;
    let mut start = 0;
    while start + (s - j) <= k {
        start += s - j;
        j += 1;
    }
    (j + (k - start), j)
}

/// Packs the lower triangle, scaling off-diagonals by `sqrt(2)` so that
/// `svec(A) . svec(B) = trace(A B)`.
pub fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let s = m.nrows();
    let mut out = Vec::with_capacity(svec_len(s));
    for j in 0..s {
        for i in j..s {
            let v = if i == j { m[(i, j)] } else { std::f64::consts::SQRT_2 * m[(i, j)] };
            out.push(v);
        }
    }
    out
}

pub fn smat(v: &[f64], s: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(s, s);
    let mut k = 0;
    for j in 0..s {
        for i in j..s {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                let x = v[k] / std::f64::consts::SQRT_2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
            k += 1;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn project_examples() {
        let d = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -2.0]);
        let p = project_psd(&d).unwrap();
        assert!((p - DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.0])).norm() < 1e-14);

        let psd = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((project_psd(&psd).unwrap() - &psd).norm() <= 1e-10);

        // eigenvalues +-1 with eigenvectors (1,1)/sqrt2 and (1,-1)/sqrt2
        let swap = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let p = project_psd(&swap).unwrap();
        assert!((p - DMatrix::from_element(2, 2, 0.5)).norm() < 1e-14);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(project_psd(&m), Err(ConicError::NotSymmetric { .. })));
    }

    #[test]
    fn projection_idempotent_and_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_sym(20, &mut rng);
            let b = random_sym(20, &mut rng);
            let pa = project_psd(&a).unwrap();
            let pb = project_psd(&b).unwrap();
            assert!((project_psd(&pa).unwrap() - &pa).norm() <= 1e-10 * (1.0 + pa.norm()));
            assert!((&pa - &pb).norm() <= (&a - &b).norm() + 1e-12);
        }
    }

    #[test]
    fn eigen_reconstruction_up_to_300() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &n in &[1, 2, 7, 30, 64, 65, 150, 300] {
            let s = random_sym(n, &mut rng);
            let e = sym_eigen(&s);
            let rec = e.reconstruct();
            assert!((&rec - &s).norm() <= 1e-10 * s.norm(), "n={n}");
            let qtq = e.vectors.transpose() * &e.vectors;
            assert!((qtq - DMatrix::identity(n, n)).amax() <= 1e-10, "n={n}");
            for k in 1..n {
                assert!(e.values[k - 1] <= e.values[k]);
            }
        }
    }

    #[test]
    fn jacobi_agrees_with_qr_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_sym(40, &mut rng);
        let j = sym_eigen(&s);
        let mut q = SymEigen {
            values: SymmetricEigen::new(s.clone()).eigenvalues,
            vectors: DMatrix::identity(40, 40),
        };
        sort_ascending(&mut q);
        assert!((j.values - q.values).amax() < 1e-12);
    }

    #[test]
    fn svec_layout() {
        let s = 4;
        for k in 0..svec_len(s) {
            let (i, j) = svec_entry(s, k);
            assert!(i >= j);
            assert_eq!(svec_index(s, i, j), k);
            assert_eq!(svec_index(s, j, i), k);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_sym(5, &mut rng);
        let b = random_sym(5, &mut rng);
        let dot: f64 = svec(&a).iter().zip(svec(&b)).map(|(x, y)| x * y).sum();
        assert!((dot - (&a * &b).trace()).abs() < 1e-13);
        assert!((smat(&svec(&a), 5) - a).amax() < 1e-15);
    }
}
