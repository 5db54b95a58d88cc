#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roa_core::conic::{ConicProgram, ProgramBuilder};

pub struct Random {
    pub prog: ConicProgram,
}

pub fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    (&a + a.transpose()) * 0.5
}

pub fn random_pd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1
}

/// Strictly primal and dual feasible SDP with one or two blocks, a few
/// nonnegative scalars and one free scalar.
pub fn random_sdp(seed: u64) -> Random {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nblocks = rng.gen_range(1..=2);
    let sizes: Vec<usize> = (0..nblocks).map(|_| rng.gen_range(1..=30)).collect();
    let nl = rng.gen_range(0..4);
    let m = rng.gen_range(1..=sizes.iter().sum::<usize>().min(25));
    let mut b = ProgramBuilder::new();
    let f = b.add_free(1);
    let l = b.add_nonneg(nl);
    let blks: Vec<_> = sizes.iter().map(|&s| b.add_psd(s)).collect();
    let rows = b.add_rows(m);
    let x0: Vec<DMatrix<f64>> = sizes.iter().map(|&s| random_pd(s, &mut rng)).collect();
    let z0: Vec<DMatrix<f64>> = sizes.iter().map(|&s| random_pd(s, &mut rng)).collect();
    let xl: Vec<f64> = (0..nl).map(|_| rng.gen_range(0.5..2.0)).collect();
    let zl: Vec<f64> = (0..nl).map(|_| rng.gen_range(0.5..2.0)).collect();
    let xf = rng.gen_range(-1.0..1.0);
    let y0: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut cf = 0.0;
    let mut cl = vec![0.0; nl];
    let mut cblk: Vec<DMatrix<f64>> = z0.clone();
    for r in 0..m {
        let mut rhs = 0.0;
        let af = rng.gen_range(-1.0..1.0);
        b.coef_free(rows + r, f, af);
        rhs += af * xf;
        cf += af * y0[r];
        for k in 0..nl {
            let a = rng.gen_range(-1.0..1.0);
            b.coef_nonneg(rows + r, l + k, a);
            rhs += a * xl[k];
            cl[k] += a * y0[r];
        }
        for (bi, &s) in sizes.iter().enumerate() {
            let a = random_sym(s, &mut rng);
            for i in 0..s {
                for j in 0..s {
                    b.coef_psd(rows + r, blks[bi], i, j, a[(i, j)]);
                }
            }
            rhs += (&a * &x0[bi]).trace();
            cblk[bi] += &a * y0[r];
        }
        b.set_rhs(rows + r, rhs);
    }
    b.cost_free(f, cf);
    for k in 0..nl {
        b.cost_nonneg(l + k, cl[k] + zl[k]);
    }
    for (bi, &s) in sizes.iter().enumerate() {
        for i in 0..s {
            for j in 0..s {
                b.cost_psd(blks[bi], i, j, cblk[bi][(i, j)]);
            }
        }
    }
    Random { prog: b.build().unwrap() }
}
