use std::cell::RefCell;
use std::sync::Arc;

use crate::kernels::{self, ConvGeom};
use crate::tensor::{log_softmax_rows, softmax_rows, Tensor};

/// Tape of recorded operations.
///
/// Nodes are appended in evaluation order, so node ids are a topological
/// order and backpropagation is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(usize),
    Upsample {
        x: usize,
        factor: usize,
    },
    ChannelShuffle {
        x: usize,
        groups: usize,
    },
    ConcatCols(usize, usize),
    ChannelAffine {
        x: usize,
        scale: Vec<f64>,
    },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Option<Vec<f64>>,
        probs: Vec<f64>,
    },
    KlDiv {
        p: usize,
        q: usize,
        temperature: f64,
        p_probs: Vec<f64>,
        q_probs: Vec<f64>,
        log_ratio: Vec<f64>,
        row_kl: Vec<f64>,
    },
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.value().shape())
    }
}

/// Gradients of a scalar with respect to every leaf that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Removes and returns a gradient, or zeros shaped like the variable when
    /// nothing flowed into it.
    pub fn take_or_zeros(&mut self, var: Var<'_>) -> Tensor {
        self.grads
            .get_mut(var.id)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(var.value().shape().to_vec()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(value.into(), false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(value.into(), true)
    }

    fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        assert_eq!(root.value.len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        if !root.requires_grad {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop_node(&nodes, id, &g, &mut grads);
        }
        Gradients { grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_scaled(&delta, 1.0),
        slot @ None => *slot = Some(delta),
    }
}

fn shaped_like(nodes: &[Node], id: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(nodes[id].value.shape().to_vec(), data).expect("gradient shape")
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                accumulate(nodes, grads, *a, shaped_like(nodes, *a, d));
            }
            if nodes[*b].requires_grad {
                let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                accumulate(nodes, grads, *b, shaped_like(nodes, *b, d));
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.scale(*s)),
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if nodes[*a].requires_grad {
                let mut da = vec![0.0; m * k];
                kernels::gemm_nt(gd, bv.data(), &mut da, m, n, k);
                accumulate(nodes, grads, *a, shaped_like(nodes, *a, da));
            }
            if nodes[*b].requires_grad {
                let mut db = vec![0.0; k * n];
                kernels::gemm_tn(av.data(), gd, &mut db, k, m, n);
                accumulate(nodes, grads, *b, shaped_like(nodes, *b, db));
            }
        }
        Op::AddRowBias(x, b) => {
            accumulate(nodes, grads, *x, g.clone());
            if nodes[*b].requires_grad {
                let n = nodes[*b].value.len();
                let mut db = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(nodes, grads, *b, shaped_like(nodes, *b, db));
            }
        }
        Op::Relu(x) => {
            let xv = &nodes[*x].value;
            let d = gd
                .iter()
                .zip(xv.data())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, shaped_like(nodes, *x, d));
        }
        Op::LeakyRelu(x, slope) => {
            let xv = &nodes[*x].value;
            let d = gd
                .iter()
                .zip(xv.data())
                .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                .collect();
            accumulate(nodes, grads, *x, shaped_like(nodes, *x, d));
        }
        Op::Tanh(x) => {
            let d = gd
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            accumulate(nodes, grads, *x, shaped_like(nodes, *x, d));
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, shaped_like(nodes, *x, gd.to_vec())),
        Op::Conv2d { x, w, b, geom } => {
            let want = (
                nodes[*x].requires_grad,
                nodes[*w].requires_grad,
                b.is_some_and(|b| nodes[b].requires_grad),
            );
            let (dx, dw, db) = kernels::conv2d_backward(
                geom,
                nodes[*x].value.data(),
                nodes[*w].value.data(),
                gd,
                want,
            );
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, shaped_like(nodes, *x, dx));
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, shaped_like(nodes, *w, dw));
            }
            if let (Some(db), Some(b)) = (db, b) {
                accumulate(nodes, grads, *b, shaped_like(nodes, *b, db));
            }
        }
        Op::MaxPool2d { x, argmax } => {
            let mut dx = vec![0.0; nodes[*x].value.len()];
            for (g, &src) in gd.iter().zip(argmax) {
                dx[src] += g;
            }
            accumulate(nodes, grads, *x, shaped_like(nodes, *x, dx));
        }
        Op::GlobalAvgPool(x) => {
            let shape = nodes[*x].value.shape();
            let plane = shape[2] * shape[3];
            let mut dx = vec![0.0; nodes[*x].value.len()];
            for (chunk, g) in dx.chunks_mut(plane).zip(gd) {
                chunk.iter_mut().for_each(|v| *v = g / plane as f64);
            }
            accumulate(nodes, grads, *x, shaped_like(nodes, *x, dx));
        }
        Op::Upsample { x, factor } => {
            let shape = nodes[*x].value.shape();
            let (h, w) = (shape[2], shape[3]);
            let (oh, ow) = (h * factor, w * factor);
            let mut dx = vec![0.0; nodes[*x].value.len()];
            for (plane_idx, dplane) in dx.chunks_mut(h * w).enumerate() {
                let gplane = &gd[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dplane[(oy / factor) * w + ox / factor] += gplane[oy * ow + ox];
                    }
                }
            }
            accumulate(nodes, grads, *x, shaped_like(nodes, *x, dx));
        }
        Op::ChannelShuffle { x, groups } => {
            let shape = nodes[*x].value.shape();
            let perm = shuffle_permutation(shape[1], *groups);
            let dx = permute_channels(gd, shape, &perm, true);
            accumulate(nodes, grads, *x, shaped_like(nodes, *x, dx));
        }
        Op::ConcatCols(a, b) => {
            let na = nodes[*a].value.row_len();
            let nb = nodes[*b].value.row_len();
            let mut da = Vec::with_capacity(nodes[*a].value.len());
            let mut db = Vec::with_capacity(nodes[*b].value.len());
            for row in gd.chunks(na + nb) {
                da.extend_from_slice(&row[..na]);
                db.extend_from_slice(&row[na..]);
            }
            accumulate(nodes, grads, *a, shaped_like(nodes, *a, da));
            accumulate(nodes, grads, *b, shaped_like(nodes, *b, db));
        }
        Op::ChannelAffine { x, scale } => {
            let shape = nodes[*x].value.shape();
            let plane: usize = shape[2..].iter().product();
            let c = shape[1];
            let dx = gd
                .iter()
                .enumerate()
                .map(|(i, g)| g * scale[(i / plane) % c])
                .collect();
            accumulate(nodes, grads, *x, shaped_like(nodes, *x, dx));
        }
        Op::Sum(x) => {
            let n = nodes[*x].value.len();
            accumulate(nodes, grads, *x, shaped_like(nodes, *x, vec![gd[0]; n]));
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let classes = nodes[*logits].value.row_len();
            let rows = targets.len() as f64;
            let mut d = probs.clone();
            for (i, row) in d.chunks_mut(classes).enumerate() {
                row[targets[i]] -= 1.0;
                let w = weights.as_ref().map_or(1.0, |w| w[i]);
                row.iter_mut().for_each(|v| *v *= gd[0] * w / rows);
            }
            accumulate(nodes, grads, *logits, shaped_like(nodes, *logits, d));
        }
        Op::KlDiv {
            p,
            q,
            temperature,
            p_probs,
            q_probs,
            log_ratio,
            row_kl,
        } => {
            let classes = nodes[*p].value.row_len();
            let rows = row_kl.len() as f64;
            let coef = gd[0] / (rows * temperature);
            if nodes[*q].requires_grad {
                let d = q_probs
                    .iter()
                    .zip(p_probs)
                    .map(|(qv, pv)| coef * (qv - pv))
                    .collect();
                accumulate(nodes, grads, *q, shaped_like(nodes, *q, d));
            }
            if nodes[*p].requires_grad {
                let d = p_probs
                    .iter()
                    .zip(log_ratio)
                    .enumerate()
                    .map(|(i, (pv, lr))| coef * pv * (lr - row_kl[i / classes]))
                    .collect();
                accumulate(nodes, grads, *p, shaped_like(nodes, *p, d));
            }
        }
    }
}

fn shuffle_permutation(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    // out channel (c * groups + g) reads in channel (g * per + c)
    let mut perm = vec![0; channels];
    for g in 0..groups {
        for c in 0..per {
            perm[c * groups + g] = g * per + c;
        }
    }
    perm
}

fn permute_channels(data: &[f64], shape: &[usize], perm: &[usize], inverse: bool) -> Vec<f64> {
    let c = shape[1];
    let plane: usize = shape[2..].iter().product();
    let mut out = vec![0.0; data.len()];
    for b in 0..shape[0] {
        for (dst_c, &src_c) in perm.iter().enumerate() {
            let (from, to) = if inverse { (dst_c, src_c) } else { (src_c, dst_c) };
            let src = &data[(b * c + from) * plane..][..plane];
            out[(b * c + to) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, &[self.id])
    }

    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("add");
        self.graph.push(t, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("sub");
        self.graph.push(t, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("mul");
        self.graph.push(t, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary(self.value().scale(s), Op::Scale(self.id, s))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert!(a.shape().len() == 2 && b.shape().len() == 2, "matmul expects matrices");
        let (m, k) = (a.shape()[0], a.shape()[1]);
        assert_eq!(k, b.shape()[0], "matmul inner dimension mismatch");
        let n = b.shape()[1];
        let mut c = vec![0.0; m * n];
        kernels::gemm_nn(a.data(), b.data(), &mut c, m, k, n);
        let t = Tensor::new(vec![m, n], c).expect("matmul");
        self.graph
            .push(t, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// Adds a length-`n` vector to every trailing row of length `n`.
    pub fn add_row_bias(&self, bias: Var<'g>) -> Var<'g> {
        let (x, b) = (self.value(), bias.value());
        let n = b.len();
        assert_eq!(x.len() % n, 0, "bias length does not divide input");
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data).expect("bias");
        self.graph
            .push(t, Op::AddRowBias(self.id, bias.id), &[self.id, bias.id])
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(self.value().map(|v| v.max(0.0)), Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        let t = self.value().map(|v| if v > 0.0 { v } else { v * slope });
        self.unary(t, Op::LeakyRelu(self.id, slope))
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(self.value().map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Var<'g> {
        let t = (*self.value()).clone().reshape(shape).expect("reshape");
        self.unary(t, Op::Reshape(self.id))
    }

    /// 2-D convolution over `[B,C,H,W]` with weight `[O, C/groups, k, k]`.
    pub fn conv2d(
        &self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Var<'g> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        assert_eq!(xs.len(), 4, "conv2d expects [B,C,H,W]");
        assert_eq!(ws[1] * groups, xs[1], "conv2d channel mismatch");
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            pad,
            groups,
        };
        let bias_val = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), bias_val.as_deref().map(|b| b.data()));
        let (oh, ow) = geom.out_hw();
        let t = Tensor::new(vec![xs[0], ws[0], oh, ow], out).expect("conv");
        let mut inputs = vec![self.id, weight.id];
        if let Some(b) = bias {
            inputs.push(b.id);
        }
        self.graph.push(
            t,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
            &inputs,
        )
    }

    /// Non-overlapping `k x k` max pooling (floor mode).
    pub fn max_pool2d(&self, k: usize) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = base + (oy * k + ky) * w + ox * k + kx;
                            if x.data()[idx] > x.data()[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![b, c, oh, ow], out).expect("pool");
        self.unary(t, Op::MaxPool2d { x: self.id, argmax })
    }

    /// `[B,C,H,W] -> [B,C]`
    pub fn global_avg_pool(&self) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        let plane = s[2] * s[3];
        let out = x
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let t = Tensor::new(vec![s[0], s[1]], out).expect("gap");
        self.unary(t, Op::GlobalAvgPool(self.id))
    }

    /// Nearest-neighbour upsampling of `[B,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(x.len() * factor * factor);
        for plane in x.data().chunks(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    out.push(plane[(oy / factor) * w + ox / factor]);
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out).expect("upsample");
        self.unary(t, Op::Upsample { x: self.id, factor })
    }

    pub fn channel_shuffle(&self, groups: usize) -> Var<'g> {
        let x = self.value();
        let perm = shuffle_permutation(x.shape()[1], groups);
        let out = permute_channels(x.data(), x.shape(), &perm, false);
        let t = Tensor::new(x.shape().to_vec(), out).expect("shuffle");
        self.unary(t, Op::ChannelShuffle { x: self.id, groups })
    }

    /// `[B,n1] ++ [B,n2] -> [B,n1+n2]`
    pub fn concat_cols(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.rows(), b.rows(), "concat row mismatch");
        let (na, nb) = (a.row_len(), b.row_len());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..a.rows() {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        let t = Tensor::new(vec![a.rows(), na + nb], data).expect("concat");
        self.graph
            .push(t, Op::ConcatCols(self.id, other.id), &[self.id, other.id])
    }

    /// Per-channel `x * scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&self, scale: &[f64], shift: &[f64]) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        let c = s[1];
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let plane: usize = s[2..].iter().product();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / plane) % c;
                v * scale[ch] + shift[ch]
            })
            .collect();
        let t = Tensor::new(s.to_vec(), data).expect("affine");
        self.unary(
            t,
            Op::ChannelAffine {
                x: self.id,
                scale: scale.to_vec(),
            },
        )
    }

    pub fn sum(&self) -> Var<'g> {
        let t = Tensor::scalar(self.value().sum());
        self.unary(t, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over rows of `weight_i * CE(softmax(logits_i), target_i)`.
    /// Weights are treated as constants.
    pub fn cross_entropy(&self, targets: &[usize], weights: Option<&[f64]>) -> Var<'g> {
        let x = self.value();
        let classes = x.row_len();
        assert_eq!(x.rows(), targets.len(), "cross_entropy target count");
        if let Some(w) = weights {
            assert_eq!(w.len(), targets.len(), "cross_entropy weight count");
        }
        let logp = log_softmax_rows(x.data(), classes, 1.0);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < classes, "target out of range");
            let w = weights.map_or(1.0, |w| w[i]);
            total -= w * logp[i * classes + t];
        }
        let probs = logp.iter().map(|v| v.exp()).collect();
        let loss = Tensor::scalar(total / targets.len() as f64);
        self.unary(
            loss,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
                probs,
            },
        )
    }

    /// Row-mean of `KL(softmax(self/T) || softmax(other/T))`.
    pub fn kl_div(&self, other: Var<'g>, temperature: f64) -> Var<'g> {
        let (p, q) = (self.value(), other.value());
        assert_eq!(p.shape(), q.shape(), "kl_div shape mismatch");
        let classes = p.row_len();
        let log_p = log_softmax_rows(p.data(), classes, temperature);
        let log_q = log_softmax_rows(q.data(), classes, temperature);
        let p_probs = softmax_rows(p.data(), classes, temperature);
        let q_probs = softmax_rows(q.data(), classes, temperature);
        let log_ratio: Vec<f64> = log_p.iter().zip(&log_q).map(|(a, b)| a - b).collect();
        let row_kl: Vec<f64> = p_probs
            .chunks(classes)
            .zip(log_ratio.chunks(classes))
            .map(|(pp, lr)| pp.iter().zip(lr).map(|(a, b)| a * b).sum())
            .collect();
        let loss = Tensor::scalar(row_kl.iter().sum::<f64>() / row_kl.len() as f64);
        self.graph.push(
            loss,
            Op::KlDiv {
                p: self.id,
                q: other.id,
                temperature,
                p_probs,
                q_probs,
                log_ratio,
                row_kl,
            },
            &[self.id, other.id],
        )
    }
}
