//! Benchmark fixtures shared by the criterion benches.

use owas::skeleton::{generate_synthetic_with, SynthOptions};
use owas::{DecoderKind, Model, ModelConfig, SkeletonSequence, Tensor};

pub fn model(decoder: DecoderKind) -> Model {
    let config = ModelConfig {
        joints: 6,
        num_classes: 4,
        channels: [8, 16, 16],
        temporal_kernel: 5,
        decoder,
        decoder_channels: 16,
        embed_dim: 16,
        batch_norm: true,
    };
    Model::new(config, 7).expect("valid benchmark config")
}

pub fn sequences(count: usize) -> Vec<SkeletonSequence> {
    let opts = SynthOptions {
        num_sequences: count,
        ..SynthOptions::default()
    };
    generate_synthetic_with(3, 6, 16, 6, 0.4, opts).expect("valid generator arguments")
}

/// `(N, 3, T, 6)` input with a smooth deterministic pattern.
pub fn input(n: usize, t: usize) -> Tensor {
    let len = n * 3 * t * 6;
    Tensor::from_vec(&[n, 3, t, 6], (0..len).map(|i| (i as f64 * 0.37).sin()).collect())
}

/// Deterministic pseudo-random points in `dim` dimensions around `k` centres.
pub fn blobs(n: usize, k: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let c = (i % k) as f64 * 10.0;
            (0..dim).map(|d| c + ((i * 31 + d * 17) as f64 * 0.61).sin()).collect()
        })
        .collect()
}
