// SPDX-License-Identifier: Apache-2.0

//! Shared fixtures for the benchmarks.

use evgzsl_core::diffcore::Tensor2;
use evgzsl_core::pipeline::{self, ModelParameters};
use evgzsl_core::{benchgen, BenchSpec, Dataset, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor2::from_vec(rows, cols, data).expect("shape matches data length")
}

/// The acceptance dataset and an untrained model of the default shape.
pub fn untrained_model() -> (Dataset, ModelParameters) {
    let dataset = benchgen::generate(&BenchSpec::acceptance()).expect("acceptance spec is valid");
    let mut config = TrainConfig::default();
    for phase in [&mut config.phase1, &mut config.phase2, &mut config.phase3] {
        phase.epochs = 0;
    }
    let (model, _) = pipeline::train_all(&dataset, &config).expect("zero-epoch training");
    (dataset, model)
}
