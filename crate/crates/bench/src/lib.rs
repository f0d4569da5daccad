//! Shared fixtures for the benchmarks under `benches/`.

use fracnet_core::connections::Toggles;
use fracnet_core::model::{ModelConfig, Scheme};

/// Character-level model shaped like the training smoke configuration.
pub fn model_config(scheme: Scheme, rate: usize, d_model: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 83,
        d_model,
        n_layers,
        n_heads: 4,
        d_ffn: 2 * d_model,
        scheme,
        rate,
        dropout: 0.0,
        toggles: Toggles::default(),
        seed: 1,
    }
}

/// Deterministic pseudo-random token ids below `vocab`.
pub fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as usize % vocab
        })
        .collect()
}

/// Values in `[-0.5, 0.5)` from a linear congruential sequence.
pub fn values(n: usize, seed: u64) -> Vec<f32> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32 - 0.5
        })
        .collect()
}
