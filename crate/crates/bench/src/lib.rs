//! Shared setup for the criterion benches.

use psgd_core::matrix::Matrix;
use psgd_core::rng::SeedStream;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut s = SeedStream::new(seed, "bench");
    Matrix::from_fn(rows, cols, |_, _| s.standard_normal())
}

pub fn random_upper(n: usize, seed: u64) -> Matrix {
    let mut s = SeedStream::new(seed, "bench-upper");
    let mut u = Matrix::from_fn(n, n, |i, j| if i <= j { 0.3 * s.standard_normal() } else { 0.0 });
    for i in 0..n {
        u.set(i, i, 1.0 + s.uniform());
    }
    u
}
