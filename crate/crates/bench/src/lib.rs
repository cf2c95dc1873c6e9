//! Shared fixtures for the benchmarks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tddl_core::sparse_recovery::{normalize_columns, Patch};

/// A normalized `m × n` dictionary and a `p`-pixel patch drawn from it.
pub fn fixture(m: usize, n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Patch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    normalize_columns(&mut d).expect("nonzero columns");
    let mut a = DMatrix::zeros(n, p);
    for i in 0..n.min(4) {
        for j in 0..p {
            a[(i * 3 % n, j)] = rng.random_range(0.5..1.5);
        }
    }
    let x = &d * a + DMatrix::from_fn(m, p, |_, _| rng.random_range(-0.01..0.01));
    let patch = Patch::new(x, p / 2).expect("finite patch");
    (d, patch)
}
