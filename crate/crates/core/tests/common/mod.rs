#![allow(dead_code)]

use fedexplore::data::{DatasetSpec, ReferenceSpec};
use fedexplore::orchestrator::ExperimentConfig;

/// A run small enough to finish in well under a second.
pub fn tiny_config(clients: usize, clusters: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        clients,
        clusters,
        rounds: 4,
        epochs: 1,
        batch_size: 8,
        rounds_per_cluster: 1,
        seed,
        dataset: DatasetSpec {
            samples_per_client: 8,
            image_side: 10,
            holdout_size: 20,
            test_size: 40,
            ..DatasetSpec::default()
        },
        reference: ReferenceSpec {
            epochs: 3,
            ..ReferenceSpec::default()
        },
        ..ExperimentConfig::default()
    }
}
