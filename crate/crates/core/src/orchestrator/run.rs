use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use coboost_nn::Tensor;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method, Toggles};
use crate::data::{partition, ClientShard, DatasetHandle};
use crate::distiller::Distiller;
use crate::ensemble::{data_amount_weights, signed_weight_step, uniform_weights, ClientLogits, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::local_trainer::{accuracy_from_logits, evaluate, split_logits, train_client, LocalTrainConfig};
use crate::metrics::{read_records, save_checkpoint, MetricRecord, MetricsSink};
use crate::model_zoo::{build_client, build_generator, ClientModel, ModelSpec};
use crate::rng::{mix_seed, stream_rng, Stream};
use crate::synthesis::{diversify, dump_sample_grid, generator_step, GeneratorLoss, SyntheticStore};

/// Trained, frozen clients for one (config, seed), shared by every method.
#[derive(Debug, Clone)]
pub struct Federation {
    pub handle: Arc<DatasetHandle>,
    pub seed: u64,
    pub shards: Vec<ClientShard>,
    pub clients: Vec<Arc<ClientModel>>,
    /// Per-client logits on the test split.
    pub test_logits: ClientLogits,
    checksums: Vec<String>,
}

impl Federation {
    pub fn build(cfg: &ExperimentConfig, handle: Arc<DatasetHandle>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut spec = cfg.partition.clone();
        spec.seed = mix_seed(spec.seed, seed);
        let shards = partition(&handle, &spec)?;
        let shape = handle.sample_shape;
        let init_base = mix_seed(seed, Stream::ClientInit as u64);
        let train_base = mix_seed(mix_seed(seed, Stream::LocalTrain as u64), cfg.local.seed);
        let clients = shards
            .par_iter()
            .map(|shard| {
                let k = shard.client_id;
                let model_spec = ModelSpec::new(cfg.client_arch(k), handle.num_classes, shape);
                // clients in the same architecture slot share their initialization
                let init_seed = mix_seed(init_base, (k % cfg.client_specs.len()) as u64);
                let model = build_client(&model_spec, init_seed, k)?;
                let local = LocalTrainConfig {
                    seed: mix_seed(train_base, k as u64),
                    ..cfg.local.clone()
                };
                train_client(model, shard, handle.as_ref(), &local).map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        let test_logits = ClientLogits::new(
            clients
                .iter()
                .map(|c| split_logits(c.as_ref(), &handle.test, shape))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let checksums = clients.iter().map(|c| c.checksum()).collect();
        Ok(Self {
            handle,
            seed,
            shards,
            clients,
            test_logits,
            checksums,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Test accuracy of the ensemble with weights `w`.
    pub fn ensemble_accuracy(&self, w: &[f64]) -> Result<f64> {
        accuracy_from_logits(&self.test_logits.combine(w), self.handle.test.labels())
    }

    /// Best single-client test accuracy.
    pub fn best_client_accuracy(&self) -> Result<f64> {
        let labels = self.handle.test.labels();
        self.test_logits
            .per_client
            .iter()
            .map(|l| accuracy_from_logits(l, labels))
            .try_fold(0.0f64, |m, a| a.map(|a| m.max(a)))
    }

    fn verify_clients(&self) -> Result<()> {
        for (c, sum) in self.clients.iter().zip(&self.checksums) {
            if c.checksum() != *sum {
                return Err(Error::Checkpoint(format!("client {} changed during the run", c.client_id)));
            }
        }
        Ok(())
    }
}

/// Serializable outcome of one run (written as `summary.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub variant: String,
    pub method: Method,
    pub seed: u64,
    pub toggles: Toggles,
    /// Server accuracy for distillation methods and FedAvg; the ensemble's
    /// accuracy for FedENS.
    pub final_accuracy: f64,
    pub final_ensemble_accuracy: f64,
    pub final_weights: Vec<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub records: Vec<MetricRecord>,
    pub weight_trajectory: Vec<Vec<f64>>,
    pub run_dir: PathBuf,
}

impl RunResult {
    /// `(epoch, value)` pairs of a scalar metric.
    pub fn series(&self, name: &str) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.name == name)
            .filter_map(|r| r.value.as_scalar().map(|v| (r.epoch, v)))
            .collect()
    }
}

pub fn run_id(method: Method, toggles: Toggles, seed: u64) -> String {
    match method {
        Method::CoBoosting if toggles != Toggles::ALL_ON => format!("{method}_{}_seed{seed}", toggles.tag()),
        _ => format!("{method}_seed{seed}"),
    }
}

struct RunContext {
    dir: PathBuf,
    sink: MetricsSink,
    started: Instant,
}

impl RunContext {
    fn open(dir: PathBuf, run_id: &str, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        let metrics = dir.join("metrics.jsonl");
        // a rerun replaces the previous stream rather than colliding with it
        if metrics.exists() {
            fs::remove_file(&metrics)?;
        }
        fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
        Ok(Self {
            sink: MetricsSink::open(metrics, run_id)?,
            dir,
            started: Instant::now(),
        })
    }

    fn finish(self, summary_base: RunSummary, weight_trajectory: Vec<Vec<f64>>) -> Result<RunResult> {
        let summary = RunSummary {
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            ..summary_base
        };
        fs::write(self.dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        let records = read_records(self.sink.path())?;
        Ok(RunResult {
            summary,
            records,
            weight_trajectory,
            run_dir: self.dir,
        })
    }
}

/// Runs `method` for `fed.seed`, writing artifacts under
/// `<output_dir>/<variant>/<run_id>`.
pub fn run_method(cfg: &ExperimentConfig, fed: &Federation, method: Method, variant: &str) -> Result<RunResult> {
    let toggles = cfg.effective_toggles(method);
    let id = run_id(method, toggles, fed.seed);
    let dir = cfg.output_dir.join(variant).join(&id);
    let ctx = RunContext::open(dir, &id, cfg)?;
    let base = RunSummary {
        run_id: id,
        variant: variant.to_string(),
        method,
        seed: fed.seed,
        toggles,
        final_accuracy: 0.0,
        final_ensemble_accuracy: 0.0,
        final_weights: Vec::new(),
        wall_clock_secs: 0.0,
    };
    let result = match method {
        Method::Fedavg => run_fedavg(cfg, fed, ctx, base),
        Method::Fedens => run_fedens(cfg, fed, ctx, base),
        Method::CoBoosting | Method::PlainDistill => run_co_boosting(cfg, fed, toggles, ctx, base),
    }?;
    fed.verify_clients()?;
    Ok(result)
}

fn save_clients(cfg: &ExperimentConfig, fed: &Federation, dir: &Path) -> Result<()> {
    if cfg.save_checkpoints {
        for c in &fed.clients {
            save_checkpoint(c, &dir.join("checkpoints").join(format!("client_{}.json", c.client_id)))?;
        }
    }
    Ok(())
}

/// Mean of the client parameters weighted by `weights` (data amounts for FedAvg).
pub fn average_parameters(clients: &[Arc<ClientModel>], weights: &[f64]) -> Result<Vec<Tensor>> {
    let first = clients.first().ok_or(Error::Empty("clients"))?;
    if clients.iter().any(|c| c.spec != first.spec) {
        return Err(Error::Config("fedavg requires identical client architectures".into()));
    }
    if weights.len() != clients.len() {
        return Err(Error::Config(format!(
            "{} averaging weights for {} clients",
            weights.len(),
            clients.len()
        )));
    }
    let mut avg: Vec<Tensor> = first.network().params().iter().map(|p| p.scale(weights[0])).collect();
    for (c, &w) in clients[1..].iter().zip(&weights[1..]) {
        for (a, p) in avg.iter_mut().zip(c.network().params()) {
            a.add_scaled(p, w);
        }
    }
    Ok(avg)
}

fn run_fedavg(cfg: &ExperimentConfig, fed: &Federation, mut ctx: RunContext, base: RunSummary) -> Result<RunResult> {
    let params = average_parameters(&fed.clients, &data_amount_weights(&fed.shards)?)?;
    let spec = fed.clients[0].spec.clone();
    let mut server = build_client(&spec, 0, fed.num_clients())?;
    server.set_params(params)?;
    let shape = fed.handle.sample_shape;
    let acc = evaluate(&server, &fed.handle.test, shape)?;
    let w = uniform_weights(fed.num_clients());
    let ens_acc = fed.ensemble_accuracy(&w)?;
    ctx.sink.append(0, "server_test_acc", acc)?;
    ctx.sink.append(0, "ensemble_test_acc", ens_acc)?;
    if cfg.save_checkpoints {
        save_checkpoint(&server, &ctx.dir.join("checkpoints").join("server.json"))?;
    }
    save_clients(cfg, fed, &ctx.dir)?;
    let summary = RunSummary {
        final_accuracy: acc,
        final_ensemble_accuracy: ens_acc,
        final_weights: w,
        ..base
    };
    ctx.finish(summary, Vec::new())
}

fn run_fedens(cfg: &ExperimentConfig, fed: &Federation, mut ctx: RunContext, base: RunSummary) -> Result<RunResult> {
    let w = uniform_weights(fed.num_clients());
    let acc = fed.ensemble_accuracy(&w)?;
    ctx.sink.append(0, "weights", w.clone())?;
    ctx.sink.append(0, "ensemble_test_acc", acc)?;
    save_clients(cfg, fed, &ctx.dir)?;
    let summary = RunSummary {
        final_accuracy: acc,
        final_ensemble_accuracy: acc,
        final_weights: w.clone(),
        ..base
    };
    ctx.finish(summary, vec![w])
}

fn run_co_boosting(
    cfg: &ExperimentConfig,
    fed: &Federation,
    toggles: Toggles,
    mut ctx: RunContext,
    base: RunSummary,
) -> Result<RunResult> {
    let handle = &fed.handle;
    let shape = handle.sample_shape;
    let seed = fed.seed;
    let classes = handle.num_classes;
    let n = fed.num_clients();

    let server_spec = ModelSpec::new(cfg.server_spec, classes, shape);
    let server = build_client(&server_spec, mix_seed(seed, Stream::ServerInit as u64), n)?;
    let mut distiller = Distiller::new(server, &cfg.distill)?;
    let mut gen = build_generator(
        cfg.synth.noise_dim,
        classes,
        shape,
        &handle.normalization,
        mix_seed(mix_seed(seed, Stream::GeneratorInit as u64), cfg.synth.seed),
    )?;
    let mut ens = WeightedEnsemble::uniform(fed.clients.clone())?;
    let mut store = SyntheticStore::new(shape, cfg.synth.store_capacity);
    let synth_seed = mix_seed(seed, cfg.synth.seed);
    let mut noise_rng = stream_rng(synth_seed, Stream::Noise, 0);
    let mut div_rng = stream_rng(synth_seed, Stream::Diversify, 0);
    let mut weight_rng = stream_rng(seed, Stream::WeightBatch, 0);
    let mut shuffle_rng = stream_rng(mix_seed(seed, cfg.distill.seed), Stream::DistillShuffle, 0);
    let loss_kind = if toggles.ghs {
        GeneratorLoss::HardAdversarial
    } else {
        GeneratorLoss::CrossEntropy
    };
    let step = cfg.weight_update.step_for(n);
    let epochs = cfg.distill.epochs;
    let mut trajectory = Vec::with_capacity(epochs);
    let mut server_acc = 0.0;
    let mut ens_acc = 0.0;

    for epoch in 0..epochs {
        let e = epoch as u64;
        let at = |err: Error| err.at_epoch(epoch);
        // 1. hard-sample generation against the current ensemble and server
        let out = generator_step(&mut gen, &ens, &distiller.server, &cfg.synth, loss_kind, &mut noise_rng).map_err(at)?;
        // 2. grow the store
        store.append(&out.batch).map_err(at)?;
        // 3. diversify the whole store; the stored originals stay untouched
        let raw = store.samples();
        let labels = store.labels();
        let x = if toggles.dhs {
            diversify(&raw, &ens, cfg.synth.epsilon, &mut div_rng).map_err(at)?
        } else {
            raw
        };
        let logits = ens.client_logits(&x).map_err(at)?;
        // 4. ensemble weight search on the diversified samples
        if toggles.ee {
            let rows = x.rows();
            let idx: Vec<usize> = if cfg.weight_update.full_store || cfg.weight_update.batch_size >= rows {
                (0..rows).collect()
            } else {
                sample(&mut weight_rng, rows, cfg.weight_update.batch_size).into_vec()
            };
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let w = signed_weight_step(&logits.select_rows(&idx), ens.weights(), &batch_labels, step).map_err(at)?;
            ens = ens.with_weights(w).map_err(at)?;
        }
        // 5. distill the server from the current ensemble
        let kd = distiller
            .distill_epoch(&x, &logits, ens.weights(), &mut shuffle_rng)
            .map_err(at)?;

        let gen_loss = out.losses.last().copied();
        if let Some(l) = gen_loss {
            ctx.sink.append(e, "gen_loss", l)?;
        }
        ctx.sink.append(e, "store_size", store.len() as f64)?;
        ctx.sink.append(e, "weights", ens.weights().to_vec())?;
        ctx.sink.append(e, "kd_loss", kd)?;
        ens_acc = fed.ensemble_accuracy(ens.weights())?;
        ctx.sink.append(e, "ensemble_test_acc", ens_acc)?;
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == epochs {
            server_acc = evaluate(&distiller.server, &handle.test, shape).map_err(at)?;
            ctx.sink.append(e, "server_test_acc", server_acc)?;
        }
        if cfg.grid_every > 0 && ((epoch + 1) % cfg.grid_every == 0 || epoch + 1 == epochs) {
            dump_sample_grid(
                &store,
                &handle.normalization,
                classes,
                cfg.grid_rows,
                epoch,
                &ctx.dir.join("grids"),
            )?;
        }
        log::debug!(
            "{} epoch {epoch}: kd {kd:.4} server {server_acc:.4} ensemble {ens_acc:.4}",
            ctx.sink.run_id()
        );
        trajectory.push(ens.weights().to_vec());
    }

    if cfg.save_checkpoints {
        save_checkpoint(&distiller.server, &ctx.dir.join("checkpoints").join("server.json"))?;
    }
    save_clients(cfg, fed, &ctx.dir)?;
    let summary = RunSummary {
        final_accuracy: server_acc,
        final_ensemble_accuracy: ens_acc,
        final_weights: ens.weights().to_vec(),
        ..base
    };
    ctx.finish(summary, trajectory)
}
