//! Shared fixtures for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samprune::model::{ModelConfig, TransformerLM};

/// A model shaped like the desk default but narrower, so one iteration stays in the millisecond range.
pub fn bench_model(seed: u64) -> TransformerLM {
    let config = ModelConfig {
        vocab_size: 256,
        d_model: 64,
        n_layers: 4,
        n_heads: 4,
        d_ff: 256,
        max_seq_len: 64,
        prune_start: 1,
        prune_end: 3,
        seed,
    };
    TransformerLM::new(config).expect("valid bench config")
}

/// Seeded random token sequences.
pub fn token_batch(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()).collect()
}
