//! Seeded inputs shared by the benchmarks under benches/.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `rows × dim` matrix with entries uniform in [-1, 1).
pub fn random_rows(rows: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Whitespace-separated tokens drawn from a vocabulary of `vocab` words.
pub fn random_text(tokens: usize, vocab: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..tokens)
        .map(|_| format!("w{}", rng.random_range(0..vocab)))
        .collect::<Vec<_>>()
        .join(" ")
}
