//! Generator training with the hard-sample and adversarial losses, the
//! synthetic store, and one-step diversification of stored samples.

use std::collections::VecDeque;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use coboost_nn::{Graph, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::ensemble::{difficulty_from_logits, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::model_zoo::{ClientModel, GeneratorModel};

/// Largest perturbation strength accepted by [`SynthesisConfig::validate`].
pub const MAX_EPSILON: f64 = 32.0 / 255.0;

/// Rows per graph when diversifying a large store.
const DIVERSIFY_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub generator_lr: f64,
    pub generator_iters: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub gen_kl_temperature: f64,
    pub noise_dim: usize,
    /// Optional cap on the store; the oldest samples are evicted first.
    pub store_capacity: Option<usize>,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            generator_lr: 1e-3,
            generator_iters: 30,
            beta: 1.0,
            epsilon: 8.0 / 255.0,
            batch_size: 128,
            gen_kl_temperature: 1.0,
            noise_dim: 100,
            store_capacity: None,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("synthesis: {what}")));
        if !(self.generator_lr > 0.0 && self.generator_lr.is_finite()) {
            return bad("generator_lr must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be non-negative");
        }
        if !(0.0..=MAX_EPSILON).contains(&self.epsilon) {
            return bad("epsilon outside [0, 32/255]");
        }
        if self.batch_size == 0 || self.noise_dim == 0 {
            return bad("batch_size and noise_dim must be positive");
        }
        if !(self.gen_kl_temperature > 0.0 && self.gen_kl_temperature.is_finite()) {
            return bad("gen_kl_temperature must be positive");
        }
        if self.store_capacity == Some(0) {
            return bad("store_capacity must be positive");
        }
        Ok(())
    }
}

/// One generated batch with the noise and labels that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub noise: Tensor,
}

/// Append-only synthetic dataset with optional FIFO capacity.
#[derive(Debug, Clone)]
pub struct SyntheticStore {
    sample_shape: [usize; 3],
    capacity: Option<usize>,
    samples: VecDeque<Vec<f64>>,
    labels: VecDeque<usize>,
}

impl SyntheticStore {
    pub fn new(sample_shape: [usize; 3], capacity: Option<usize>) -> Self {
        Self {
            sample_shape,
            capacity,
            samples: VecDeque::new(),
            labels: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn append(&mut self, batch: &SyntheticBatch) -> Result<()> {
        let expected = self.batch_shape(batch.labels.len());
        if batch.samples.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                expected,
                actual: batch.samples.shape().to_vec(),
            });
        }
        for (i, &y) in batch.labels.iter().enumerate() {
            self.samples.push_back(batch.samples.row(i).to_vec());
            self.labels.push_back(y);
        }
        if let Some(cap) = self.capacity {
            while self.labels.len() > cap {
                self.samples.pop_front();
                self.labels.pop_front();
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labels.iter().copied().collect()
    }

    fn batch_shape(&self, rows: usize) -> Vec<usize> {
        let [c, h, w] = self.sample_shape;
        vec![rows, c, h, w]
    }

    /// Every stored sample as one `[N, C, H, W]` tensor, oldest first.
    pub fn samples(&self) -> Tensor {
        let data = self.samples.iter().flatten().copied().collect();
        Tensor::new(self.batch_shape(self.len()), data).expect("store rows have the sample length")
    }

    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let data = indices.iter().flat_map(|&i| self.samples[i].iter().copied()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let t = Tensor::new(self.batch_shape(indices.len()), data).expect("store rows have the sample length");
        (t, labels)
    }
}

fn row_log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    scaled.into_iter().map(|v| v - lse).collect()
}

/// `KL(p || q)` for two probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// `mean_i d_i * ce_i`.
pub fn difficulty_weighted_mean(difficulty: &[f64], ce: &[f64]) -> f64 {
    difficulty.iter().zip(ce).map(|(d, c)| d * c).sum::<f64>() / ce.len() as f64
}

fn per_sample_ce(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -row_log_softmax(logits.row(i), 1.0)[y])
        .collect()
}

/// Row-mean `KL(softmax(p/T) || softmax(q/T))`.
fn mean_kl(p: &Tensor, q: &Tensor, temperature: f64) -> f64 {
    let rows = p.rows();
    (0..rows)
        .map(|i| {
            let lp = row_log_softmax(p.row(i), temperature);
            let lq = row_log_softmax(q.row(i), temperature);
            lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>()
        })
        .sum::<f64>()
        / rows as f64
}

/// Difficulty-weighted ensemble cross-entropy of a batch.
pub fn hard_sample_loss(ens: &WeightedEnsemble, samples: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = ens.ensemble_logits(samples)?;
    let d = difficulty_from_logits(&logits, labels);
    Ok(difficulty_weighted_mean(&d, &per_sample_ce(&logits, labels)))
}

/// `-mean KL(ensemble || server)` at `temperature`; never positive.
pub fn adversarial_divergence_loss(
    ens: &WeightedEnsemble,
    server: &ClientModel,
    samples: &Tensor,
    temperature: f64,
) -> Result<f64> {
    let teacher = ens.ensemble_logits(samples)?;
    let student = server.forward_logits(samples)?;
    Ok(-mean_kl(&teacher, &student, temperature))
}

/// `L_H + beta * L_A`, evaluated without gradients.
pub fn generator_objective(
    ens: &WeightedEnsemble,
    server: &ClientModel,
    samples: &Tensor,
    labels: &[usize],
    cfg: &SynthesisConfig,
) -> Result<f64> {
    let lh = hard_sample_loss(ens, samples, labels)?;
    let la = adversarial_divergence_loss(ens, server, samples, cfg.gen_kl_temperature)?;
    Ok(lh + cfg.beta * la)
}

/// Generator objective selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// Difficulty-weighted CE plus the adversarial divergence term.
    HardAdversarial,
    /// Plain ensemble cross-entropy.
    CrossEntropy,
}

#[derive(Debug, Clone)]
pub struct GeneratorStep {
    pub batch: SyntheticBatch,
    /// Loss at each inner iteration, before that iteration's update.
    pub losses: Vec<f64>,
}

/// Draws standard normal noise and uniform labels for one epoch.
pub fn sample_noise(rng: &mut impl Rng, batch_size: usize, noise_dim: usize, num_classes: usize) -> (Tensor, Vec<usize>) {
    let noise = Tensor::from_fn(vec![batch_size, noise_dim], |_| StandardNormal.sample(rng));
    let labels = (0..batch_size).map(|_| rng.random_range(0..num_classes)).collect();
    (noise, labels)
}

/// Runs `generator_iters` Adam steps on a fixed noise/label batch. The
/// returned batch is the generation of the last inner iteration (taken before
/// its update), or the raw generation when no iterations are requested.
pub fn generator_step(
    gen: &mut GeneratorModel,
    ens: &WeightedEnsemble,
    server: &ClientModel,
    cfg: &SynthesisConfig,
    loss_kind: GeneratorLoss,
    rng: &mut impl Rng,
) -> Result<GeneratorStep> {
    if gen.num_classes != ens.num_classes() {
        return Err(Error::Config("generator and ensemble disagree on classes".into()));
    }
    gen.set_learning_rate(cfg.generator_lr);
    let (noise, labels) = sample_noise(rng, cfg.batch_size, gen.noise_dim, gen.num_classes);
    if cfg.generator_iters == 0 {
        let samples = gen.generate(&noise, &labels)?;
        return Ok(GeneratorStep {
            batch: SyntheticBatch { samples, labels, noise },
            losses: Vec::new(),
        });
    }
    let mut losses = Vec::with_capacity(cfg.generator_iters);
    let mut last = None;
    for iteration in 0..cfg.generator_iters {
        let graph = Graph::new();
        let (x, params) = gen.forward_var(&graph, &noise, &labels, true)?;
        let logits = ens.forward_var(&graph, x);
        let loss = match loss_kind {
            GeneratorLoss::CrossEntropy => logits.cross_entropy(&labels, None),
            GeneratorLoss::HardAdversarial => {
                let d = difficulty_from_logits(&logits.value(), &labels);
                let hard = logits.cross_entropy(&labels, Some(&d));
                if cfg.beta == 0.0 {
                    hard
                } else {
                    let (student, _) = server.forward_var(&graph, x, false);
                    let adv = logits.kl_div(student, cfg.gen_kl_temperature).scale(-cfg.beta);
                    hard.add(adv)
                }
            }
        };
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::Divergent { iteration, loss: value });
        }
        losses.push(value);
        if iteration + 1 == cfg.generator_iters {
            last = Some((*x.value()).clone());
        }
        let mut grads = graph.backward(loss);
        let grads = params.iter().map(|p| grads.take_or_zeros(*p)).collect();
        gen.apply_gradients(grads);
    }
    Ok(GeneratorStep {
        batch: SyntheticBatch {
            samples: last.expect("at least one iteration"),
            labels,
            noise,
        },
        losses,
    })
}

/// Draws one direction `u ~ U[-1,1]^K` per sample.
pub fn draw_directions(rng: &mut impl Rng, rows: usize, classes: usize) -> Tensor {
    Tensor::from_fn(vec![rows, classes], |_| rng.random_range(-1.0..=1.0))
}

/// Moves each sample by `epsilon` along the normalized input gradient of
/// `u . A_w(x)`, with fresh directions `u` from `rng`.
pub fn diversify(samples: &Tensor, ens: &WeightedEnsemble, epsilon: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let directions = draw_directions(rng, samples.rows(), ens.num_classes());
    diversify_along(samples, ens, epsilon, &directions)
}

/// [`diversify`] with given directions `[N, K]`. Samples whose gradient is
/// zero are returned unchanged.
pub fn diversify_along(samples: &Tensor, ens: &WeightedEnsemble, epsilon: f64, directions: &Tensor) -> Result<Tensor> {
    let rows = samples.rows();
    if directions.shape() != [rows, ens.num_classes()] {
        return Err(Error::ShapeMismatch {
            expected: vec![rows, ens.num_classes()],
            actual: directions.shape().to_vec(),
        });
    }
    if epsilon == 0.0 || rows == 0 {
        return Ok(samples.clone());
    }
    let row_len = samples.row_len();
    let mut out = samples.clone();
    let starts: Vec<usize> = (0..rows).step_by(DIVERSIFY_CHUNK).collect();
    for start in starts {
        let idx: Vec<usize> = (start..(start + DIVERSIFY_CHUNK).min(rows)).collect();
        let graph = Graph::new();
        let x = graph.variable(samples.select_rows(&idx));
        let u = graph.constant(directions.select_rows(&idx));
        let objective = ens.forward_var(&graph, x).mul(u).sum();
        let grads = graph.backward(objective);
        let Some(grad) = grads.get(x) else { continue };
        for (local, &i) in idx.iter().enumerate() {
            let g = grad.row(local);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                continue;
            }
            let dst = &mut out.data_mut()[i * row_len..(i + 1) * row_len];
            for (d, gv) in dst.iter_mut().zip(g) {
                *d += epsilon * gv / norm;
            }
        }
    }
    Ok(out)
}

/// Writes `grid_epoch{epoch}.png` into `dir`: one column per class holding the
/// `rows` most recent samples of that class.
pub fn dump_sample_grid(
    store: &SyntheticStore,
    normalization: &Normalization,
    num_classes: usize,
    rows: usize,
    epoch: usize,
    dir: &Path,
) -> Result<PathBuf> {
    if rows == 0 || num_classes == 0 {
        return Err(Error::Config("sample grid needs at least one row and one class".into()));
    }
    if store.is_empty() {
        return Err(Error::Empty("synthetic store"));
    }
    let [c, h, w] = store.sample_shape();
    if c != 1 && c != 3 {
        return Err(Error::Config(format!("cannot render {c}-channel samples")));
    }
    let mut picks: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in store.labels.iter().enumerate().rev() {
        if y < num_classes && picks[y].len() < rows {
            picks[y].push(i);
        }
    }
    let gap = 1;
    let width = num_classes * (w + gap) + gap;
    let height = rows * (h + gap) + gap;
    let mut pixels = vec![0u8; width * height * c];
    for (col, chosen) in picks.iter().enumerate() {
        for (row, &i) in chosen.iter().enumerate() {
            let sample = &store.samples[i];
            for ch in 0..c {
                for py in 0..h {
                    for px in 0..w {
                        let v = normalization.denormalize(ch, sample[(ch * h + py) * w + px]);
                        let gx = gap + col * (w + gap) + px;
                        let gy = gap + row * (h + gap) + py;
                        pixels[(gy * width + gx) * c + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("grid_epoch{epoch}.png"));
    let mut encoder = png::Encoder::new(BufWriter::new(File::create(&path)?), width as u32, height as u32);
    encoder.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&pixels)?;
    writer.finish()?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_loss_arithmetic() {
        assert_eq!(difficulty_weighted_mean(&[0.5], &[2.0]), 1.0);
        assert!((difficulty_weighted_mean(&[0.2, 0.8], &[1.0, 3.0]) - 1.3).abs() < 1e-12);
        assert_eq!(difficulty_weighted_mean(&[0.0, 0.0], &[4.0, 9.0]), 0.0);
    }

    #[test]
    fn kl_closed_form() {
        let expected = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let got = kl_divergence(&[0.9, 0.1], &[0.5, 0.5]);
        assert!((got - expected).abs() < 1e-12);
        assert!((-got + 0.3681).abs() < 1e-4);
        let p = Tensor::new(vec![1, 2], vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!((mean_kl(&p, &q, 1.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn config_guards_epsilon() {
        let mut cfg = SynthesisConfig::default();
        cfg.validate().unwrap();
        cfg.epsilon = 33.0 / 255.0;
        assert!(cfg.validate().is_err());
        cfg.epsilon = -0.01;
        assert!(cfg.validate().is_err());
    }

    fn batch(rows: usize, offset: usize) -> SyntheticBatch {
        SyntheticBatch {
            samples: Tensor::from_fn(vec![rows, 1, 2, 2], |i| (i + offset * 4) as f64),
            labels: (0..rows).map(|i| (i + offset) % 3).collect(),
            noise: Tensor::zeros(vec![rows, 1]),
        }
    }

    #[test]
    fn store_grows_and_evicts_oldest() {
        let mut open = SyntheticStore::new([1, 2, 2], None);
        let mut capped = SyntheticStore::new([1, 2, 2], Some(10));
        for t in 1..=5 {
            open.append(&batch(4, 4 * (t - 1))).unwrap();
            capped.append(&batch(4, 4 * (t - 1))).unwrap();
            assert_eq!(open.len(), 4 * t);
            assert_eq!(capped.len(), (4 * t).min(10));
        }
        // the capped store keeps the newest ten rows
        let all = open.samples();
        let kept = capped.samples();
        assert_eq!(kept.data(), &all.data()[10 * 4..]);
        assert!(open.append(&SyntheticBatch {
            samples: Tensor::zeros(vec![1, 1, 3, 3]),
            labels: vec![0],
            noise: Tensor::zeros(vec![1, 1]),
        })
        .is_err());
    }
}
