//! Datasets and non-IID client partitioning.

mod dataset;
mod partition;
mod readers;

pub use dataset::{load_dataset, DatasetHandle, Normalization, Split, SUPPORTED_DATASETS};
pub use partition::{
    partition, partition_class_count, partition_dirichlet, partition_labels, partition_lognormal,
    ClientShard, PartitionDocument, PartitionScheme, PartitionSpec, MAX_PARTITION_RETRIES,
};
