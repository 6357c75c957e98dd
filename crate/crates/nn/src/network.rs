use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// One step of a feed-forward network. Parameterized layers refer to slots in
/// [`Network::params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Linear {
        weight: usize,
        bias: usize,
    },
    Conv2d {
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    Relu,
    LeakyRelu(f64),
    Tanh,
    MaxPool2d(usize),
    GlobalAvgPool,
    Flatten,
    /// Reshape each sample to the given per-sample shape.
    Reshape(Vec<usize>),
    Upsample(usize),
    ChannelShuffle(usize),
    /// `x + f(x)`
    Residual(Vec<Layer>),
    ChannelAffine {
        scale: Vec<f64>,
        shift: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<Arc<Tensor>>,
}

impl Network {
    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Arc<Tensor>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Replaces all parameter tensors; shapes must match the current ones.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), String> {
        if params.len() != self.params.len() {
            return Err(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            ));
        }
        for (i, (old, new)) in self.params.iter().zip(&params).enumerate() {
            if old.shape() != new.shape() {
                return Err(format!(
                    "parameter {i}: expected shape {:?}, got {:?}",
                    old.shape(),
                    new.shape()
                ));
            }
        }
        self.params = params.into_iter().map(Arc::new).collect();
        Ok(())
    }

    /// Records a forward pass on `graph`. Parameters enter the tape as
    /// gradient-receiving leaves when `trainable`, otherwise as constants;
    /// gradients still flow through them to `x` either way.
    pub fn forward<'g>(&self, graph: &'g Graph, x: Var<'g>, trainable: bool) -> (Var<'g>, Vec<Var<'g>>) {
        let params: Vec<Var<'g>> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.variable(Arc::clone(p))
                } else {
                    graph.constant(Arc::clone(p))
                }
            })
            .collect();
        let out = run_layers(&self.layers, x, &params);
        (out, params)
    }

    /// Forward pass without gradient bookkeeping beyond the throwaway tape.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let graph = Graph::new();
        let input = graph.constant(x.clone());
        let (out, _) = self.forward(&graph, input, false);
        (*out.value()).clone()
    }
}

fn run_layers<'g>(layers: &[Layer], mut x: Var<'g>, params: &[Var<'g>]) -> Var<'g> {
    for layer in layers {
        x = match layer {
            Layer::Linear { weight, bias } => x.matmul(params[*weight]).add_row_bias(params[*bias]),
            Layer::Conv2d {
                weight,
                bias,
                stride,
                pad,
                groups,
            } => x.conv2d(params[*weight], Some(params[*bias]), *stride, *pad, *groups),
            Layer::Relu => x.relu(),
            Layer::LeakyRelu(s) => x.leaky_relu(*s),
            Layer::Tanh => x.tanh(),
            Layer::MaxPool2d(k) => x.max_pool2d(*k),
            Layer::GlobalAvgPool => x.global_avg_pool(),
            Layer::Flatten => {
                let s = x.shape();
                x.reshape(vec![s[0], s[1..].iter().product()])
            }
            Layer::Reshape(shape) => {
                let mut full = vec![x.shape()[0]];
                full.extend(shape);
                x.reshape(full)
            }
            Layer::Upsample(f) => x.upsample_nearest(*f),
            Layer::ChannelShuffle(g) => x.channel_shuffle(*g),
            Layer::Residual(inner) => {
                let y = run_layers(inner, x, params);
                x.add(y)
            }
            Layer::ChannelAffine { scale, shift } => x.channel_affine(scale, shift),
        };
    }
    x
}

/// Incrementally assembles a [`Network`], tracking the per-sample shape and
/// initializing parameters uniformly in `±1/sqrt(fan_in)`.
pub struct NetworkBuilder<'r, R: Rng> {
    rng: &'r mut R,
    input_shape: Vec<usize>,
    shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<Arc<Tensor>>,
}

impl<'r, R: Rng> NetworkBuilder<'r, R> {
    pub fn new(input_shape: Vec<usize>, rng: &'r mut R) -> Self {
        Self {
            rng,
            shape: input_shape.clone(),
            input_shape,
            layers: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> usize {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.params.push(Arc::new(t));
        self.params.len() - 1
    }

    pub fn linear(mut self, out: usize) -> Self {
        assert_eq!(self.shape.len(), 1, "linear expects a flat input, got {:?}", self.shape);
        let fan_in = self.shape[0];
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.uniform(vec![fan_in, out], bound);
        let bias = self.uniform(vec![out], bound);
        self.layers.push(Layer::Linear { weight, bias });
        self.shape = vec![out];
        self
    }

    pub fn conv(mut self, out: usize, kernel: usize, stride: usize, pad: usize, groups: usize) -> Self {
        assert_eq!(self.shape.len(), 3, "conv expects [C,H,W], got {:?}", self.shape);
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        assert!(c.is_multiple_of(groups) && out.is_multiple_of(groups), "groups must divide channels");
        assert!(h + 2 * pad >= kernel && w + 2 * pad >= kernel, "kernel larger than input");
        let fan_in = (c / groups) * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.uniform(vec![out, c / groups, kernel, kernel], bound);
        let bias = self.uniform(vec![out], bound);
        self.layers.push(Layer::Conv2d {
            weight,
            bias,
            stride,
            pad,
            groups,
        });
        self.shape = vec![
            out,
            (h + 2 * pad - kernel) / stride + 1,
            (w + 2 * pad - kernel) / stride + 1,
        ];
        self
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn leaky_relu(mut self, slope: f64) -> Self {
        self.layers.push(Layer::LeakyRelu(slope));
        self
    }

    pub fn tanh(mut self) -> Self {
        self.layers.push(Layer::Tanh);
        self
    }

    pub fn max_pool(mut self, k: usize) -> Self {
        assert_eq!(self.shape.len(), 3);
        self.layers.push(Layer::MaxPool2d(k));
        self.shape = vec![self.shape[0], self.shape[1] / k, self.shape[2] / k];
        self
    }

    pub fn global_avg_pool(mut self) -> Self {
        assert_eq!(self.shape.len(), 3);
        self.layers.push(Layer::GlobalAvgPool);
        self.shape = vec![self.shape[0]];
        self
    }

    pub fn flatten(mut self) -> Self {
        self.layers.push(Layer::Flatten);
        self.shape = vec![self.shape.iter().product()];
        self
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.shape.iter().product::<usize>(),
            "reshape must preserve size"
        );
        self.layers.push(Layer::Reshape(shape.clone()));
        self.shape = shape;
        self
    }

    pub fn upsample(mut self, factor: usize) -> Self {
        assert_eq!(self.shape.len(), 3);
        self.layers.push(Layer::Upsample(factor));
        self.shape = vec![self.shape[0], self.shape[1] * factor, self.shape[2] * factor];
        self
    }

    pub fn channel_shuffle(mut self, groups: usize) -> Self {
        assert_eq!(self.shape[0] % groups, 0);
        self.layers.push(Layer::ChannelShuffle(groups));
        self
    }

    pub fn channel_affine(mut self, scale: Vec<f64>, shift: Vec<f64>) -> Self {
        self.layers.push(Layer::ChannelAffine { scale, shift });
        self
    }

    /// Wraps the layers added by `body` in a skip connection. `body` must
    /// preserve the shape.
    pub fn residual(mut self, body: impl FnOnce(Self) -> Self) -> Self {
        let outer = std::mem::take(&mut self.layers);
        let entry_shape = self.shape.clone();
        let mut inner = body(self);
        assert_eq!(inner.shape, entry_shape, "residual body must preserve shape");
        let block = std::mem::replace(&mut inner.layers, outer);
        inner.layers.push(Layer::Residual(block));
        inner
    }

    pub fn build(self) -> Network {
        Network {
            input_shape: self.input_shape,
            output_shape: self.shape,
            layers: self.layers,
            params: self.params,
        }
    }
}
