#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use superpose_core::DMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random `rows x cols` matrix of rank at most `rank`.
pub fn low_rank(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize) -> DMatrix<f64> {
    gaussian(rng, rows, rank) * gaussian(rng, rank, cols)
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Reference recomposition as an explicit sum of outer products.
pub fn outer_sum(terms: impl IntoIterator<Item = (f64, Vec<f64>, Vec<f64>)>, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, cols);
    for (w, u, v) in terms {
        for i in 0..rows {
            for j in 0..cols {
                out[(i, j)] += w * u[i] * v[j];
            }
        }
    }
    out
}
