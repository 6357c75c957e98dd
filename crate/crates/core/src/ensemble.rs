//! Weighted logit ensemble, sample difficulty, and the signed-gradient search
//! over ensemble weights.

use std::sync::Arc;

use coboost_nn::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::model_zoo::{ClientModel, Predictor};

/// `sum_k w_k f_k(x)` over frozen clients.
#[derive(Debug, Clone)]
pub struct WeightedEnsemble {
    clients: Vec<Arc<ClientModel>>,
    weights: Vec<f64>,
}

impl WeightedEnsemble {
    pub fn new(clients: Vec<Arc<ClientModel>>, weights: Vec<f64>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::Empty("ensemble"));
        }
        if clients.len() != weights.len() {
            return Err(Error::Config(format!(
                "{} clients but {} weights",
                clients.len(),
                weights.len()
            )));
        }
        if let Some(c) = clients.iter().find(|c| !c.is_frozen()) {
            return Err(Error::Config(format!("client {} is not frozen", c.client_id)));
        }
        let classes = clients[0].spec.num_classes;
        if clients.iter().any(|c| c.spec.num_classes != classes) {
            return Err(Error::Config("clients disagree on the number of classes".into()));
        }
        check_simplex(&weights)?;
        Ok(Self { clients, weights })
    }

    pub fn uniform(clients: Vec<Arc<ClientModel>>) -> Result<Self> {
        let n = clients.len();
        Self::new(clients, uniform_weights(n))
    }

    pub fn clients(&self) -> &[Arc<ClientModel>] {
        &self.clients
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.clients[0].spec.num_classes
    }

    /// Same clients, new weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.clients.clone(), weights)
    }

    /// Per-client logits for a batch. Clients are frozen, so callers may
    /// reuse these for any weight vector.
    pub fn client_logits(&self, batch: &Tensor) -> Result<ClientLogits> {
        let per_client = self
            .clients
            .iter()
            .map(|c| c.forward_logits(batch))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClientLogits { per_client })
    }

    pub fn ensemble_logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.client_logits(batch)?.combine(&self.weights))
    }

    /// Records `sum_k w_k f_k(x)` on `graph`; gradients reach `x` but never the
    /// client parameters or the weights.
    pub fn forward_var<'g>(&self, graph: &'g Graph, x: Var<'g>) -> Var<'g> {
        let mut total: Option<Var<'g>> = None;
        for (client, &w) in self.clients.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let (logits, _) = client.forward_var(graph, x, false);
            let term = logits.scale(w);
            total = Some(match total {
                Some(t) => t.add(term),
                None => term,
            });
        }
        // weights sum to one, so at least one term exists
        total.expect("nonzero ensemble weight")
    }
}

impl Predictor for WeightedEnsemble {
    fn predict_logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.ensemble_logits(batch)
    }
}

/// Logits of every client for one batch, `[n][B, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientLogits {
    pub per_client: Vec<Tensor>,
}

impl ClientLogits {
    pub fn new(per_client: Vec<Tensor>) -> Result<Self> {
        let Some(first) = per_client.first() else {
            return Err(Error::Empty("client logits"));
        };
        if per_client.iter().any(|t| t.shape() != first.shape()) {
            return Err(Error::ShapeMismatch {
                expected: first.shape().to_vec(),
                actual: per_client
                    .iter()
                    .find(|t| t.shape() != first.shape())
                    .map(|t| t.shape().to_vec())
                    .unwrap_or_default(),
            });
        }
        Ok(Self { per_client })
    }

    pub fn rows(&self) -> usize {
        self.per_client[0].rows()
    }

    pub fn combine(&self, weights: &[f64]) -> Tensor {
        let mut out = Tensor::zeros(self.per_client[0].shape().to_vec());
        for (t, &w) in self.per_client.iter().zip(weights) {
            out.add_scaled(t, w);
        }
        out
    }

    /// Keeps the given rows of every client.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            per_client: self.per_client.iter().map(|t| t.select_rows(rows)).collect(),
        }
    }
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// `w_k = n_k / sum_j n_j`.
pub fn data_amount_weights(shards: &[ClientShard]) -> Result<Vec<f64>> {
    let total: usize = shards.iter().map(ClientShard::len).sum();
    if shards.is_empty() || total == 0 {
        return Err(Error::Empty("shards"));
    }
    Ok(shards.iter().map(|s| s.len() as f64 / total as f64).collect())
}

fn check_simplex(w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("weights {w:?} are not on the probability simplex")));
    }
    Ok(())
}

/// Clamp each entry into `[0,1]` and rescale to sum one; uniform if the
/// clamped vector is all zero.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Empty("weight vector"));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("weights {raw:?}")));
    }
    let clamped: Vec<f64> = raw.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let sum: f64 = clamped.iter().sum();
    if sum == 0.0 {
        return Ok(uniform_weights(raw.len()));
    }
    Ok(clamped.into_iter().map(|v| v / sum).collect())
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `1 - softmax(logits_i)[y_i]` per row.
pub fn difficulty_from_logits(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| 1.0 - softmax_row(logits.row(i))[labels[i]])
        .collect()
}

/// Per-sample difficulty of `batch` for `predictor`.
pub fn sample_difficulty(predictor: &(impl Predictor + ?Sized), batch: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let logits = predictor.predict_logits(batch)?;
    if labels.len() != logits.rows() {
        return Err(Error::ShapeMismatch {
            expected: vec![logits.rows()],
            actual: vec![labels.len()],
        });
    }
    if labels.iter().any(|&y| y >= logits.row_len()) {
        return Err(Error::Config("label outside the logit range".into()));
    }
    Ok(difficulty_from_logits(&logits, labels))
}

/// Mean cross-entropy of `sum_k w_k F_k` against `labels`.
pub fn weight_objective(logits: &ClientLogits, weights: &[f64], labels: &[usize]) -> f64 {
    let combined = logits.combine(weights);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = combined.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Analytic gradient of [`weight_objective`]:
/// `dL/dw_k = mean_i <softmax(A_i) - onehot(y_i), F_k(x_i)>`.
pub fn weight_gradient(logits: &ClientLogits, weights: &[f64], labels: &[usize]) -> Vec<f64> {
    let combined = logits.combine(weights);
    let rows = labels.len();
    let mut residual = Vec::with_capacity(combined.len());
    for (i, &y) in labels.iter().enumerate() {
        let mut p = softmax_row(combined.row(i));
        p[y] -= 1.0;
        residual.extend(p);
    }
    logits
        .per_client
        .iter()
        .map(|f| f.data().iter().zip(&residual).map(|(a, b)| a * b).sum::<f64>() / rows as f64)
        .collect()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightUpdateConfig {
    /// Signed step size; `None` means `0.1 / n`.
    pub step_size: Option<f64>,
    pub batch_size: usize,
    /// Use the whole synthetic store instead of a sampled mini-batch.
    pub full_store: bool,
}

impl Default for WeightUpdateConfig {
    fn default() -> Self {
        Self {
            step_size: None,
            batch_size: 128,
            full_store: false,
        }
    }
}

impl WeightUpdateConfig {
    pub fn step_for(&self, n: usize) -> f64 {
        self.step_size.unwrap_or(0.1 / n as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.step_size.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("invalid weight update config {self:?}")));
        }
        Ok(())
    }
}

/// `Normalize(w - step * sign(grad))` from cached client logits.
pub fn signed_weight_step(logits: &ClientLogits, weights: &[f64], labels: &[usize], step: f64) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Empty("weight-update batch"));
    }
    let grad = weight_gradient(logits, weights, labels);
    let raw: Vec<f64> = weights
        .iter()
        .zip(&grad)
        .map(|(w, g)| w - step * sign(*g))
        .collect();
    normalize_weights(&raw)
}

/// One signed-gradient step of the ensemble weights on `batch`.
pub fn update_weights(
    ens: &WeightedEnsemble,
    batch: &Tensor,
    labels: &[usize],
    cfg: &WeightUpdateConfig,
) -> Result<WeightedEnsemble> {
    if labels.is_empty() {
        return Err(Error::Empty("weight-update batch"));
    }
    let logits = ens.client_logits(batch)?;
    let w = signed_weight_step(&logits, ens.weights(), labels, cfg.step_for(ens.len()))?;
    ens.with_weights(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        Tensor::new(vec![rows.len(), k], rows.concat()).unwrap()
    }

    #[test]
    fn combine_examples() {
        let two = ClientLogits::new(vec![logits(&[&[1.0, 0.0]]), logits(&[&[0.0, 1.0]])]).unwrap();
        assert_eq!(two.combine(&[0.5, 0.5]).data(), &[0.5, 0.5]);

        let three = ClientLogits::new(vec![
            logits(&[&[2.0, 0.0]]),
            logits(&[&[0.0, 2.0]]),
            logits(&[&[1.0, 1.0]]),
        ])
        .unwrap();
        // 0.2*[2,0] + 0.3*[0,2] + 0.5*[1,1]
        let c = three.combine(&[0.2, 0.3, 0.5]);
        assert!((c.data()[0] - 0.9).abs() < 1e-12 && (c.data()[1] - 1.1).abs() < 1e-12);

        let same = ClientLogits::new(vec![logits(&[&[0.3, -1.0]]); 4]).unwrap();
        let c = same.combine(&uniform_weights(4));
        assert!((c.data()[0] - 0.3).abs() < 1e-12 && (c.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_logit_shapes_are_rejected() {
        assert!(ClientLogits::new(vec![logits(&[&[1.0, 0.0]]), logits(&[&[0.0, 1.0, 2.0]])]).is_err());
    }

    #[test]
    fn weight_vector_helpers() {
        assert_eq!(uniform_weights(4), vec![0.25; 4]);
        let shard = |n: usize| ClientShard {
            client_id: 0,
            indices: (0..n).collect(),
            class_histogram: vec![n],
        };
        assert_eq!(data_amount_weights(&[shard(10), shard(30)]).unwrap(), vec![0.25, 0.75]);
        assert_eq!(data_amount_weights(&[shard(7), shard(7), shard(7)]).unwrap(), uniform_weights(3));
    }

    #[test]
    fn difficulty_examples() {
        assert!(difficulty_from_logits(&logits(&[&[800.0, 0.0, 0.0]]), &[0])[0].abs() < 1e-12);
        let e2 = 2f64.exp();
        let d = difficulty_from_logits(&logits(&[&[2.0, 0.0, 0.0]]), &[0])[0];
        assert!((d - (1.0 - e2 / (e2 + 2.0))).abs() < 1e-12);
        assert!((d - 0.2131).abs() < 1e-4);
        for y in 0..5 {
            let d = difficulty_from_logits(&logits(&[&[0.7; 5]]), &[y])[0];
            assert!((d - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_examples() {
        let w = normalize_weights(&[0.6, -0.2, 0.8]).unwrap();
        assert!((w[0] - 0.6 / 1.4).abs() < 1e-12 && w[1] == 0.0 && (w[2] - 0.8 / 1.4).abs() < 1e-12);
        assert!((w[0] - 0.4286).abs() < 1e-4 && (w[2] - 0.5714).abs() < 1e-4);
        let feasible = vec![0.1, 0.2, 0.7];
        let again = normalize_weights(&feasible).unwrap();
        for (a, b) in again.iter().zip(&feasible) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(normalize_weights(&[-1.0, -0.5]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(normalize_weights(&[f64::NAN, 0.2]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn flat_gradient_leaves_weights_alone() {
        let zero = ClientLogits::new(vec![Tensor::zeros(vec![3, 4]); 2]).unwrap();
        let w = signed_weight_step(&zero, &[0.3, 0.7], &[0, 1, 2], 0.05).unwrap();
        assert!((w[0] - 0.3).abs() < 1e-15 && (w[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn better_client_gains_weight() {
        // A puts its mass on the label, B on the wrong class
        let labels = [0, 1, 0, 1];
        let a = logits(&[&[3.0, 0.0], &[0.0, 3.0], &[3.0, 0.0], &[0.0, 3.0]]);
        let b = logits(&[&[0.0, 3.0], &[3.0, 0.0], &[0.0, 3.0], &[3.0, 0.0]]);
        let cl = ClientLogits::new(vec![a, b]).unwrap();
        let w0 = [0.5, 0.5];
        // finite-difference oracle on the gradient sign
        let h = 1e-6;
        let fd = |k: usize| {
            let mut p = w0;
            p[k] += h;
            let mut m = w0;
            m[k] -= h;
            (weight_objective(&cl, &p, &labels) - weight_objective(&cl, &m, &labels)) / (2.0 * h)
        };
        assert!(fd(0) < 0.0 && fd(1) > 0.0);
        let w1 = signed_weight_step(&cl, &w0, &labels, 0.05).unwrap();
        assert!(w1[0] > 0.5 && w1[1] < 0.5);

        // grid search over the 1-simplex puts the optimum at w_A = 1
        let best = (0..=100)
            .map(|i| i as f64 / 100.0)
            .min_by(|x, y| {
                weight_objective(&cl, &[*x, 1.0 - x], &labels)
                    .partial_cmp(&weight_objective(&cl, &[*y, 1.0 - y], &labels))
                    .unwrap()
            })
            .unwrap();
        assert_eq!(best, 1.0);
        let mut w = w0.to_vec();
        let mut previous = w[0];
        for _ in 0..30 {
            w = signed_weight_step(&cl, &w, &labels, 0.05).unwrap();
            assert!(w[0] >= previous);
            previous = w[0];
        }
        assert_eq!(w, vec![1.0, 0.0]);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let cl = ClientLogits::new(vec![Tensor::zeros(vec![0, 3])]).unwrap();
        assert!(matches!(signed_weight_step(&cl, &[1.0], &[], 0.1), Err(Error::Empty(_))));
    }
}
