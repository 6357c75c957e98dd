//! Server training by temperature-softened KL distillation from the
//! weighted ensemble.

use coboost_nn::{Graph, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::ClientLogits;
use crate::error::{Error, Result};
use crate::model_zoo::ClientModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub server_lr: f64,
    pub momentum: f64,
    pub kd_temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            server_lr: 0.01,
            momentum: 0.9,
            kd_temperature: 4.0,
            batch_size: 128,
            epochs: 500,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return Err(Error::Config("kd_temperature must be positive".into()));
        }
        if !(self.server_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("invalid server optimizer settings".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// `tau^2 * mean_i KL(softmax(t_i/tau) || softmax(s_i/tau))`.
pub fn kd_loss(teacher: &Tensor, student: &Tensor, tau: f64) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::ShapeMismatch {
            expected: teacher.shape().to_vec(),
            actual: student.shape().to_vec(),
        });
    }
    let graph = Graph::new();
    let t = graph.constant(teacher.clone());
    let s = graph.constant(student.clone());
    Ok(t.kl_div(s, tau).value().data()[0] * tau * tau)
}

/// The server model and its optimizer state.
#[derive(Debug, Clone)]
pub struct Distiller {
    pub server: ClientModel,
    opt: Sgd,
    tau: f64,
    batch_size: usize,
}

impl Distiller {
    pub fn new(server: ClientModel, cfg: &DistillConfig) -> Result<Self> {
        cfg.validate()?;
        if server.is_frozen() {
            return Err(Error::Frozen(server.client_id));
        }
        Ok(Self {
            server,
            opt: Sgd::new(cfg.server_lr, cfg.momentum),
            tau: cfg.kd_temperature,
            batch_size: cfg.batch_size,
        })
    }

    /// One SGD step toward fixed teacher logits; returns the batch loss.
    pub fn step(&mut self, samples: &Tensor, teacher: &Tensor) -> Result<f64> {
        let graph = Graph::new();
        let x = graph.constant(samples.clone());
        let (student, params) = self.server.forward_var(&graph, x, true);
        let t = graph.constant(teacher.clone());
        let loss = t.kl_div(student, self.tau).scale(self.tau * self.tau);
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("distillation loss".into()));
        }
        let mut grads = graph.backward(loss);
        let grads: Vec<Tensor> = params.iter().map(|&p| grads.take_or_zeros(p)).collect();
        self.opt.step(self.server.params_mut()?, &grads);
        Ok(value)
    }

    /// One pass over `samples` in shuffled mini-batches. `teacher` holds the
    /// per-client logits of the same rows and `weights` the current ensemble
    /// weights; the teacher is a constant. Returns the row-weighted mean loss.
    pub fn distill_epoch(
        &mut self,
        samples: &Tensor,
        teacher: &ClientLogits,
        weights: &[f64],
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let rows = samples.rows();
        if rows == 0 {
            return Err(Error::Empty("synthetic store"));
        }
        if teacher.rows() != rows {
            return Err(Error::ShapeMismatch {
                expected: vec![rows],
                actual: vec![teacher.rows()],
            });
        }
        let targets = teacher.combine(weights);
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.batch_size) {
            let loss = self.step(&samples.select_rows(chunk), &targets.select_rows(chunk))?;
            total += loss * chunk.len() as f64;
        }
        Ok(total / rows as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    fn plain_kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    #[test]
    fn kd_loss_examples() {
        let a = t(&[&[1.0, -2.0, 0.5]]);
        assert!(kd_loss(&a, &a, 4.0).unwrap().abs() < 1e-15);

        let got = kd_loss(&t(&[&[2.0, 0.0]]), &t(&[&[0.0, 2.0]]), 1.0).unwrap();
        let expected = plain_kl(&softmax(&[2.0, 0.0]), &softmax(&[0.0, 2.0]));
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.5232).abs() < 1e-4);

        // the softened distributions flatten, so the KL itself vanishes; the
        // tau^2 factor keeps a finite limit of half the centered variance
        let tau = 1e3;
        let far = kd_loss(&t(&[&[5.0, -3.0, 1.0]]), &t(&[&[-4.0, 2.0, 0.0]]), tau).unwrap();
        assert!(far / (tau * tau) < 1e-4);
        let diff = [9.0, -5.0, 1.0];
        let mean = diff.iter().sum::<f64>() / 3.0;
        let limit = diff.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / 3.0 / 2.0;
        assert!((far - limit).abs() < 1e-2);
        assert!(kd_loss(&t(&[&[1.0, 2.0]]), &t(&[&[1.0, 2.0, 3.0]]), 1.0).is_err());
    }

    #[test]
    fn tau_squared_scaling() {
        let (p, q) = ([0.3, -1.2, 2.0], [1.0, 0.4, -0.5]);
        for tau in [1.0, 2.0, 4.0] {
            let scaled: Vec<f64> = p.iter().map(|v| v / tau).collect();
            let other: Vec<f64> = q.iter().map(|v| v / tau).collect();
            let expected = tau * tau * plain_kl(&softmax(&scaled), &softmax(&other));
            let got = kd_loss(&t(&[&p]), &t(&[&q]), tau).unwrap();
            assert!((got - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn config_rejects_bad_temperature() {
        let cfg = DistillConfig {
            kd_temperature: 0.0,
            ..DistillConfig::default()
        };
        assert!(cfg.validate().is_err());
        DistillConfig::default().validate().unwrap();
    }
}
