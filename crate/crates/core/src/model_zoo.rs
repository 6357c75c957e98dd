//! Client/server classifier architectures and the label-conditioned generator.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use coboost_nn::{Adam, Graph, Network, NetworkBuilder, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Normalization;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Cnn5,
    Lenet5,
    /// Softmax regression on the flattened input.
    Linear,
    MlpTiny,
    Cnn2,
    ResnetSmall,
    MobilenetSmall,
    ShufflenetSmall,
}

impl Arch {
    pub const ALL: [Arch; 8] = [
        Arch::Cnn5,
        Arch::Lenet5,
        Arch::Linear,
        Arch::MlpTiny,
        Arch::Cnn2,
        Arch::ResnetSmall,
        Arch::MobilenetSmall,
        Arch::ShufflenetSmall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Cnn5 => "cnn5",
            Arch::Lenet5 => "lenet5",
            Arch::Linear => "linear",
            Arch::MlpTiny => "mlp_tiny",
            Arch::Cnn2 => "cnn2",
            Arch::ResnetSmall => "resnet_small",
            Arch::MobilenetSmall => "mobilenet_small",
            Arch::ShufflenetSmall => "shufflenet_small",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownArch(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub num_classes: usize,
    /// `(channels, height, width)`
    pub input_shape: [usize; 3],
}

impl ModelSpec {
    pub fn new(arch: Arch, num_classes: usize, input_shape: [usize; 3]) -> Self {
        Self {
            arch,
            num_classes,
            input_shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub shard_size: usize,
    pub final_train_accuracy: Option<f64>,
    pub curve: Vec<EpochRecord>,
}

/// Anything that maps a sample batch to a logit matrix.
pub trait Predictor {
    fn predict_logits(&self, batch: &Tensor) -> Result<Tensor>;
}

/// A classifier plus bookkeeping. Used for clients and for the server.
#[derive(Debug, Clone)]
pub struct ClientModel {
    pub client_id: usize,
    pub spec: ModelSpec,
    pub seed: u64,
    net: Network,
    frozen: bool,
    pub metadata: TrainingMetadata,
}

impl ClientModel {
    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mutable parameters; refused once the model is frozen.
    pub fn params_mut(&mut self) -> Result<&mut [Arc<Tensor>]> {
        if self.frozen {
            return Err(Error::Frozen(self.client_id));
        }
        Ok(self.net.params_mut())
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(self.client_id));
        }
        self.net.set_params(params).map_err(Error::Checkpoint)
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Hex SHA-256 over every parameter's bits.
    pub fn checksum(&self) -> String {
        params_checksum(self.net.params())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.spec.input_shape {
            let mut expected = vec![s.first().copied().unwrap_or(0)];
            expected.extend(self.spec.input_shape);
            return Err(Error::ShapeMismatch {
                expected,
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Raw pre-softmax logits `[B, num_classes]`.
    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        Ok(self.net.infer(batch))
    }

    /// Records the forward pass on `graph`; see [`Network::forward`].
    pub fn forward_var<'g>(&self, graph: &'g Graph, x: Var<'g>, trainable: bool) -> (Var<'g>, Vec<Var<'g>>) {
        self.net.forward(graph, x, trainable)
    }
}

impl Predictor for ClientModel {
    fn predict_logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_logits(batch)
    }
}

pub fn params_checksum(params: &[Arc<Tensor>]) -> String {
    let mut h = Sha256::new();
    for p in params {
        for d in p.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn architecture(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Network> {
    let [c, h, w] = spec.input_shape;
    if c == 0 || h == 0 || w == 0 || spec.num_classes == 0 {
        return Err(Error::Config(format!("degenerate model spec {spec:?}")));
    }
    let needs_spatial = !matches!(spec.arch, Arch::MlpTiny | Arch::Linear);
    if needs_spatial && (h < 4 || w < 4) {
        return Err(Error::Config(format!("{} needs inputs of at least 4x4", spec.arch)));
    }
    let k = spec.num_classes;
    let b = NetworkBuilder::new(vec![c, h, w], rng);
    let net = match spec.arch {
        Arch::Linear => b.flatten().linear(k),
        Arch::MlpTiny => b.flatten().linear(64).relu().linear(k),
        Arch::Cnn2 => b
            .conv(8, 3, 1, 1, 1)
            .relu()
            .max_pool(2)
            .conv(16, 3, 1, 1, 1)
            .relu()
            .max_pool(2)
            .flatten()
            .linear(k),
        Arch::Cnn5 => b
            .conv(32, 5, 1, 2, 1)
            .relu()
            .max_pool(2)
            .conv(64, 5, 1, 2, 1)
            .relu()
            .max_pool(2)
            .flatten()
            .linear(512)
            .relu()
            .linear(128)
            .relu()
            .linear(k),
        Arch::Lenet5 => {
            let b = b.conv(6, 5, 1, 2, 1).relu().max_pool(2);
            // classic LeNet drops padding on the second conv when there is room
            let pad = if b.shape()[1] >= 10 { 0 } else { 2 };
            b.conv(16, 5, 1, pad, 1)
                .relu()
                .max_pool(2)
                .flatten()
                .linear(120)
                .relu()
                .linear(84)
                .relu()
                .linear(k)
        }
        Arch::ResnetSmall => b
            .conv(16, 3, 1, 1, 1)
            .relu()
            .residual(|r| r.conv(16, 3, 1, 1, 1).relu().conv(16, 3, 1, 1, 1))
            .relu()
            .conv(32, 3, 2, 1, 1)
            .relu()
            .residual(|r| r.conv(32, 3, 1, 1, 1).relu().conv(32, 3, 1, 1, 1))
            .relu()
            .global_avg_pool()
            .linear(k),
        Arch::MobilenetSmall => b
            .conv(16, 3, 1, 1, 1)
            .relu()
            .conv(16, 3, 1, 1, 16)
            .relu()
            .conv(32, 1, 1, 0, 1)
            .relu()
            .conv(32, 3, 2, 1, 32)
            .relu()
            .conv(64, 1, 1, 0, 1)
            .relu()
            .global_avg_pool()
            .linear(k),
        Arch::ShufflenetSmall => b
            .conv(24, 3, 1, 1, 1)
            .relu()
            .residual(|r| {
                r.conv(24, 1, 1, 0, 3)
                    .relu()
                    .channel_shuffle(3)
                    .conv(24, 3, 1, 1, 24)
                    .conv(24, 1, 1, 0, 3)
            })
            .relu()
            .conv(48, 3, 2, 1, 1)
            .relu()
            .global_avg_pool()
            .linear(k),
    };
    Ok(net.build())
}

/// Builds an unfrozen model whose parameters depend only on `(spec, seed)`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ClientModel> {
    build_client(spec, seed, 0)
}

pub fn build_client(spec: &ModelSpec, seed: u64, client_id: usize) -> Result<ClientModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = architecture(spec, &mut rng)?;
    debug_assert_eq!(net.output_shape(), [spec.num_classes]);
    Ok(ClientModel {
        client_id,
        spec: spec.clone(),
        seed,
        net,
        frozen: false,
        metadata: TrainingMetadata::default(),
    })
}

/// Adam momentum coefficients used for the generator.
pub const GENERATOR_BETAS: (f64, f64) = (0.5, 0.999);
const EMBED_DIM: usize = 16;

/// Label-conditioned generator: `[z, E[y]] -> sample`, squashed by `tanh`
/// and mapped onto the normalized image of `[0,1]`.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub noise_dim: usize,
    pub num_classes: usize,
    pub output_shape: [usize; 3],
    embedding: Arc<Tensor>,
    net: Network,
    embed_opt: Adam,
    net_opt: Adam,
}

pub fn build_generator(
    noise_dim: usize,
    num_classes: usize,
    output_shape: [usize; 3],
    normalization: &Normalization,
    seed: u64,
) -> Result<GeneratorModel> {
    let [c, h, w] = output_shape;
    if noise_dim == 0 || num_classes == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Config("generator dimensions must be positive".into()));
    }
    if normalization.mean.len() != c {
        return Err(Error::Config("normalization channels differ from output channels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedding = {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Tensor::from_fn(vec![num_classes, EMBED_DIM], |_| normal.sample(&mut rng))
    };
    let scale: Vec<f64> = normalization.std.iter().map(|s| 0.5 / s).collect();
    let shift: Vec<f64> = normalization
        .mean
        .iter()
        .zip(&normalization.std)
        .map(|(m, s)| (0.5 - m) / s)
        .collect();
    let b = NetworkBuilder::new(vec![noise_dim + EMBED_DIM], &mut rng);
    let net = if h >= 16 && h % 4 == 0 && w % 4 == 0 {
        b.linear(64 * (h / 4) * (w / 4))
            .reshape(vec![64, h / 4, w / 4])
            .leaky_relu(0.2)
            .upsample(2)
            .conv(64, 3, 1, 1, 1)
            .leaky_relu(0.2)
            .upsample(2)
            .conv(32, 3, 1, 1, 1)
            .leaky_relu(0.2)
            .conv(c, 3, 1, 1, 1)
    } else {
        b.linear(128)
            .leaky_relu(0.2)
            .linear(256)
            .leaky_relu(0.2)
            .linear(c * h * w)
            .reshape(vec![c, h, w])
    }
    .tanh()
    .channel_affine(scale, shift)
    .build();
    let (b1, b2) = GENERATOR_BETAS;
    Ok(GeneratorModel {
        noise_dim,
        num_classes,
        output_shape,
        embedding: Arc::new(embedding),
        net,
        embed_opt: Adam::new(1e-3, b1, b2),
        net_opt: Adam::new(1e-3, b1, b2),
    })
}

impl GeneratorModel {
    fn one_hot(&self, labels: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::zeros(vec![labels.len(), self.num_classes]);
        for (i, &y) in labels.iter().enumerate() {
            if y >= self.num_classes {
                return Err(Error::Config(format!("label {y} out of range")));
            }
            t.data_mut()[i * self.num_classes + y] = 1.0;
        }
        Ok(t)
    }

    fn check_noise(&self, z: &Tensor, labels: &[usize]) -> Result<()> {
        if z.shape().len() != 2 || z.shape()[1] != self.noise_dim || z.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.len(), self.noise_dim],
                actual: z.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Records generation on `graph`. The returned parameter handles are the
    /// embedding followed by the network parameters.
    pub fn forward_var<'g>(
        &self,
        graph: &'g Graph,
        z: &Tensor,
        labels: &[usize],
        trainable: bool,
    ) -> Result<(Var<'g>, Vec<Var<'g>>)> {
        self.check_noise(z, labels)?;
        let embedding = if trainable {
            graph.variable(Arc::clone(&self.embedding))
        } else {
            graph.constant(Arc::clone(&self.embedding))
        };
        let code = graph.constant(self.one_hot(labels)?).matmul(embedding);
        let input = graph.constant(z.clone()).concat_cols(code);
        let (out, mut params) = self.net.forward(graph, input, trainable);
        params.insert(0, embedding);
        Ok((out, params))
    }

    /// Samples `[B, C, H, W]` for noise `[B, noise_dim]` and labels.
    pub fn generate(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let graph = Graph::new();
        let (out, _) = self.forward_var(&graph, z, labels, false)?;
        Ok((*out.value()).clone())
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.embed_opt.lr = lr;
        self.net_opt.lr = lr;
    }

    /// One Adam step; `grads` ordered as the handles from `forward_var`.
    pub fn apply_gradients(&mut self, mut grads: Vec<Tensor>) {
        let embed_grad = grads.remove(0);
        self.embed_opt
            .step(std::slice::from_mut(&mut self.embedding), &[embed_grad]);
        self.net_opt.step(self.net.params_mut(), &grads);
    }

    pub fn checksum(&self) -> String {
        let mut all = vec![Arc::clone(&self.embedding)];
        all.extend(self.net.params().iter().cloned());
        params_checksum(&all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, shape: [usize; 3]) -> Tensor {
        let len = n * shape.iter().product::<usize>();
        Tensor::new(
            vec![n, shape[0], shape[1], shape[2]],
            (0..len).map(|i| ((i as f64) * 0.013).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn every_arch_emits_class_logits() {
        for arch in Arch::ALL {
            for shape in [[1, 8, 8], [3, 32, 32]] {
                let spec = ModelSpec::new(arch, 10, shape);
                let m = build_model(&spec, 1).unwrap();
                let out = m.forward_logits(&batch(2, shape)).unwrap();
                assert_eq!(out.shape(), &[2, 10], "{arch} on {shape:?}");
            }
        }
    }

    #[test]
    fn lenet_on_mnist_shape() {
        let m = build_model(&ModelSpec::new(Arch::Lenet5, 10, [1, 28, 28]), 3).unwrap();
        assert_eq!(m.forward_logits(&batch(4, [1, 28, 28])).unwrap().shape(), &[4, 10]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::new(Arch::Cnn2, 10, [1, 8, 8]);
        assert_eq!(build_model(&spec, 9).unwrap().checksum(), build_model(&spec, 9).unwrap().checksum());
        assert_ne!(build_model(&spec, 9).unwrap().checksum(), build_model(&spec, 10).unwrap().checksum());
    }

    #[test]
    fn inference_is_repeatable() {
        let m = build_model(&ModelSpec::new(Arch::ResnetSmall, 10, [1, 8, 8]), 2).unwrap();
        let x = batch(3, [1, 8, 8]);
        assert_eq!(m.forward_logits(&x).unwrap(), m.forward_logits(&x).unwrap());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = build_model(&ModelSpec::new(Arch::MlpTiny, 10, [1, 8, 8]), 2).unwrap();
        assert!(matches!(
            m.forward_logits(&batch(2, [1, 7, 8])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn unknown_arch_name() {
        assert!(matches!("vgg11".parse::<Arch>(), Err(Error::UnknownArch(_))));
        assert_eq!("mlp_tiny".parse::<Arch>().unwrap(), Arch::MlpTiny);
    }

    #[test]
    fn frozen_models_refuse_mutation() {
        let mut m = build_model(&ModelSpec::new(Arch::MlpTiny, 10, [1, 8, 8]), 2).unwrap();
        m.freeze();
        assert!(matches!(m.params_mut(), Err(Error::Frozen(_))));
    }

    #[test]
    fn generator_shapes_and_range() {
        let norm = Normalization {
            mean: vec![0.5],
            std: vec![0.25],
        };
        for shape in [[1, 8, 8], [1, 28, 28]] {
            let g = build_generator(100, 10, shape, &norm, 4).unwrap();
            let z = Tensor::from_fn(vec![5, 100], |i| ((i * 7) as f64).sin() * 3.0);
            let x = g.generate(&z, &[3, 0, 1, 9, 3]).unwrap();
            assert_eq!(x.shape(), &[5, shape[0], shape[1], shape[2]]);
            assert!(x.data().iter().all(|&v| (-2.0..=2.0).contains(&v)));
            assert_eq!(x, g.generate(&z, &[3, 0, 1, 9, 3]).unwrap());
        }
    }

    #[test]
    fn generator_depends_on_label() {
        let norm = Normalization {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let g = build_generator(8, 10, [1, 8, 8], &norm, 4).unwrap();
        let z = Tensor::full(vec![1, 8], 0.3);
        assert_ne!(g.generate(&z, &[0]).unwrap(), g.generate(&z, &[1]).unwrap());
    }
}
