#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use coboost::data::{load_dataset, partition, DatasetHandle, PartitionSpec};
use coboost::local_trainer::{train_client, LocalTrainConfig};
use coboost::model_zoo::{build_client, Arch, ClientModel, ModelSpec};

pub fn blobs() -> DatasetHandle {
    load_dataset("synthetic_blobs", Path::new("unused")).unwrap()
}

pub fn spec(arch: Arch, handle: &DatasetHandle) -> ModelSpec {
    ModelSpec::new(arch, handle.num_classes, handle.sample_shape)
}

/// Frozen clients trained briefly on a Dirichlet split of the blobs.
pub fn trained_clients(handle: &DatasetHandle, n: usize, alpha: f64, epochs: usize, seed: u64) -> Vec<Arc<ClientModel>> {
    let shards = partition(handle, &PartitionSpec::dirichlet(alpha, n, seed)).unwrap();
    shards
        .iter()
        .map(|shard| {
            let model = build_client(&spec(Arch::MlpTiny, handle), seed, shard.client_id).unwrap();
            let cfg = LocalTrainConfig {
                epochs,
                batch_size: 32,
                seed: seed + shard.client_id as u64,
                ..LocalTrainConfig::default()
            };
            Arc::new(train_client(model, shard, handle, &cfg).unwrap())
        })
        .collect()
}

/// An unfrozen copy of `model`'s parameters under a new id.
pub fn parameter_copy(model: &ClientModel, client_id: usize) -> ClientModel {
    let mut copy = build_client(&model.spec, model.seed, client_id).unwrap();
    copy.set_params(model.network().params().iter().map(|p| (**p).clone()).collect())
        .unwrap();
    copy
}
