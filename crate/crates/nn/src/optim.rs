use std::sync::Arc;

use crate::tensor::Tensor;

/// SGD with heavy-ball momentum: `v = m*v + g; p -= lr*v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Arc<Tensor>], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = self.momentum * *vv + gv;
            }
            Arc::make_mut(p).add_scaled(v, -self.lr);
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Arc<Tensor>], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = Arc::make_mut(p).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_accumulates() {
        let mut params = vec![Arc::new(Tensor::scalar(1.0))];
        let g = vec![Tensor::scalar(1.0)];
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut params, &g);
        assert!((params[0].data()[0] - 0.9).abs() < 1e-12);
        opt.step(&mut params, &g);
        // v = 0.9 * 1 + 1 = 1.9
        assert!((params[0].data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = vec![Arc::new(Tensor::scalar(0.0))];
        let mut opt = Adam::new(0.01, 0.9, 0.999);
        opt.step(&mut params, &[Tensor::scalar(3.0)]);
        assert!((params[0].data()[0] + 0.01).abs() < 1e-8);
    }
}
