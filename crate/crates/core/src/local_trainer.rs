//! Local pre-training of client models on their own shards.

use coboost_nn::{Graph, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::model_zoo::{ClientModel, EpochRecord, Predictor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("invalid local training config {self:?}")));
        }
        Ok(())
    }
}

/// Where a trainer reads its examples from.
pub trait TrainSource {
    fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>);
}

impl TrainSource for DatasetHandle {
    fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        self.train_batch(indices)
    }
}

/// Mini-batch SGD with cross-entropy on the shard, then freeze.
pub fn train_client(
    mut model: ClientModel,
    shard: &ClientShard,
    source: &impl TrainSource,
    cfg: &LocalTrainConfig,
) -> Result<ClientModel> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(Error::Empty("shard"));
    }
    model.params_mut()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut order = shard.indices.clone();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = source.gather(chunk);
            let graph = Graph::new();
            let input = graph.constant(x);
            let (logits, params) = model.forward_var(&graph, input, true);
            let loss = logits.cross_entropy(&y, None);
            let loss_value = loss.value().data()[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "client {} local loss at epoch {epoch}",
                    model.client_id
                )));
            }
            loss_sum += loss_value * chunk.len() as f64;
            correct += count_correct(&logits.value(), &y);
            let mut grads = graph.backward(loss);
            let grads: Vec<Tensor> = params.iter().map(|&p| grads.take_or_zeros(p)).collect();
            drop(params);
            drop(graph);
            opt.step(model.params_mut()?, &grads);
        }
        curve.push(EpochRecord {
            epoch,
            loss: loss_sum / order.len() as f64,
            accuracy: correct as f64 / order.len() as f64,
        });
    }

    let (x, y) = source.gather(&shard.indices);
    let final_acc = count_correct(&model.forward_logits(&x)?, &y) as f64 / y.len() as f64;
    model.metadata.shard_size = shard.len();
    model.metadata.final_train_accuracy = Some(final_acc);
    model.metadata.curve = curve;
    model.freeze();
    Ok(model)
}

pub(crate) fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count()
}

/// Top-1 accuracy of precomputed logits.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(count_correct(logits, labels) as f64 / labels.len() as f64)
}

const EVAL_BATCH: usize = 256;

/// Logits for a whole split, batched.
pub fn split_logits(predictor: &(impl Predictor + ?Sized), split: &Split, shape: [usize; 3]) -> Result<Tensor> {
    if split.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let all: Vec<usize> = (0..split.len()).collect();
    let parts = all
        .chunks(EVAL_BATCH)
        .map(|chunk| predictor.predict_logits(&split.gather(chunk, shape).0))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::concat_rows(&refs).expect("uniform logit widths"))
}

/// Top-1 accuracy of a model or ensemble on a split.
pub fn evaluate(predictor: &(impl Predictor + ?Sized), split: &Split, shape: [usize; 3]) -> Result<f64> {
    let logits = split_logits(predictor, split, shape)?;
    accuracy_from_logits(&logits, split.labels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, partition, PartitionSpec};
    use crate::model_zoo::{build_client, Arch, ModelSpec};
    use std::cell::RefCell;
    use std::collections::BTreeSet;
    use std::path::Path;

    fn blobs() -> DatasetHandle {
        load_dataset("synthetic_blobs", Path::new(".")).unwrap()
    }

    fn spec() -> ModelSpec {
        ModelSpec::new(Arch::MlpTiny, 10, [1, 8, 8])
    }

    fn quick(epochs: usize, seed: u64) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs,
            batch_size: 32,
            seed,
            ..Default::default()
        }
    }

    struct Logging<'a> {
        inner: &'a DatasetHandle,
        seen: RefCell<BTreeSet<usize>>,
    }

    impl TrainSource for Logging<'_> {
        fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
            self.seen.borrow_mut().extend(indices);
            self.inner.gather(indices)
        }
    }

    #[test]
    fn single_class_shard_is_fit_perfectly() {
        let h = blobs();
        let indices: Vec<usize> = (0..2000).filter(|&i| h.train.labels()[i] == 4).collect();
        let shard = ClientShard {
            client_id: 0,
            class_histogram: vec![0, 0, 0, 0, indices.len(), 0, 0, 0, 0, 0],
            indices,
        };
        let m = train_client(build_client(&spec(), 1, 0).unwrap(), &shard, &h, &quick(3, 1)).unwrap();
        assert_eq!(m.metadata.final_train_accuracy, Some(1.0));
        assert!(m.is_frozen());
    }

    #[test]
    fn clients_fit_their_shards() {
        let h = blobs();
        let shards = partition(&h, &PartitionSpec::dirichlet(0.3, 4, 2)).unwrap();
        for s in &shards {
            let m = train_client(build_client(&spec(), 5, s.client_id).unwrap(), s, &h, &quick(30, 3)).unwrap();
            let acc = m.metadata.final_train_accuracy.unwrap();
            assert!(acc > 0.9, "client {} train accuracy {acc}", s.client_id);
        }
    }

    #[test]
    fn training_is_deterministic_and_frozen() {
        let h = blobs();
        let shards = partition(&h, &PartitionSpec::dirichlet(0.5, 3, 1)).unwrap();
        let a = train_client(build_client(&spec(), 5, 0).unwrap(), &shards[0], &h, &quick(2, 7)).unwrap();
        let b = train_client(build_client(&spec(), 5, 0).unwrap(), &shards[0], &h, &quick(2, 7)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(matches!(
            train_client(a, &shards[0], &h, &quick(1, 7)),
            Err(Error::Frozen(_))
        ));
    }

    #[test]
    fn reads_only_its_own_shard() {
        let h = blobs();
        let shards = partition(&h, &PartitionSpec::dirichlet(0.5, 3, 1)).unwrap();
        let logging = Logging {
            inner: &h,
            seen: RefCell::new(BTreeSet::new()),
        };
        train_client(build_client(&spec(), 5, 1).unwrap(), &shards[1], &logging, &quick(2, 7)).unwrap();
        let own: BTreeSet<usize> = shards[1].indices.iter().copied().collect();
        assert_eq!(*logging.seen.borrow(), own);
    }

    #[test]
    fn empty_shard_is_rejected() {
        let h = blobs();
        let shard = ClientShard {
            client_id: 0,
            indices: vec![],
            class_histogram: vec![0; 10],
        };
        assert!(matches!(
            train_client(build_client(&spec(), 1, 0).unwrap(), &shard, &h, &quick(1, 1)),
            Err(Error::Empty(_))
        ));
    }

    struct Oracle<'a>(&'a [usize], RefCell<usize>);

    impl Predictor for Oracle<'_> {
        fn predict_logits(&self, batch: &Tensor) -> Result<Tensor> {
            let mut offset = self.1.borrow_mut();
            let mut out = Tensor::zeros(vec![batch.rows(), 10]);
            for i in 0..batch.rows() {
                out.data_mut()[i * 10 + self.0[*offset + i]] = 1.0;
            }
            *offset += batch.rows();
            Ok(out)
        }
    }

    struct Constant;

    impl Predictor for Constant {
        fn predict_logits(&self, batch: &Tensor) -> Result<Tensor> {
            Ok(Tensor::from_fn(vec![batch.rows(), 10], |i| if i % 10 == 3 { 1.0 } else { 0.0 }))
        }
    }

    #[test]
    fn evaluate_edge_cases() {
        let h = blobs();
        let perfect = Oracle(h.test.labels(), RefCell::new(0));
        assert_eq!(evaluate(&perfect, &h.test, h.sample_shape).unwrap(), 1.0);
        // blobs test split is exactly balanced
        assert!((evaluate(&Constant, &h.test, h.sample_shape).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(accuracy_from_logits(&Tensor::zeros(vec![0, 10]), &[]), Err(Error::Empty(_))));
    }
}
