//! Shared fixtures for the benchmarks.

use coevo_core::ExecutionMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random pass/fail matrix with `n` rows, `m` generated columns and one
/// ground-truth column. Roughly a third of the rows come out correct.
pub fn random_matrix(n: usize, m: usize, seed: u64) -> ExecutionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let correct = rng.random_bool(0.35);
            let mut row: Vec<bool> = (0..m).map(|_| rng.random_bool(if correct { 0.8 } else { 0.4 })).collect();
            row.push(correct);
            row
        })
        .collect();
    ExecutionMatrix::new("bench", m, 1, rows).expect("well-formed rows")
}

/// `len` response lengths and integer rewards in `[-4, 4]`.
pub fn rewards_and_lengths(len: usize, seed: u64) -> (Vec<f64>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| (f64::from(rng.random_range(-4i32..=4)), rng.random_range(50u64..8000)))
        .unzip()
}
