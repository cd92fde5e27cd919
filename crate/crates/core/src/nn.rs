//! Layers and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Affine layer `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in_dim)`, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(in_dim, out_dim, bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }

    /// Forward pass with the layer's parameters treated as constants.
    pub fn forward_frozen(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.frozen_param(store, self.weight);
        let b = tape.frozen_param(store, self.bias);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }

    pub fn set_identity(&self, store: &mut ParamStore) {
        assert_eq!(self.in_dim, self.out_dim, "identity needs a square layer");
        *store.get_mut(self.weight) = Tensor::identity(self.in_dim);
        *store.get_mut(self.bias) = Tensor::zeros(1, self.out_dim);
    }

    pub fn zero(&self, store: &mut ParamStore) {
        *store.get_mut(self.weight) = Tensor::zeros(self.in_dim, self.out_dim);
        *store.get_mut(self.bias) = Tensor::zeros(1, self.out_dim);
    }
}

/// Stack of linear layers with ReLU between them. When `relu_output` is set
/// the last layer is followed by a ReLU as well.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_output: bool,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], relu_output: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims.windows(2).enumerate().map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng)).collect();
        Self { layers, relu_output }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        self.run(tape, x, |layer, tape, h| layer.forward(tape, store, h))
    }

    pub fn forward_frozen(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        self.run(tape, x, |layer, tape, h| layer.forward_frozen(tape, store, h))
    }

    fn run(&self, tape: &mut Tape, x: Var, mut f: impl FnMut(&Linear, &mut Tape, Var) -> Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = f(layer, tape, h);
            if i < last || self.relu_output {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for l in &self.layers {
            l.zero(store);
        }
    }
}

/// Inverted dropout. A no-op when `rng` is `None` (evaluation mode) or `p == 0`.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut R>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let (r, c) = tape.shape(x);
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_vec(r, c, (0..r * c).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect());
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(1, dim, 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, dim));
        Self { gain, bias, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.layer_norm(x, self.eps);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let h = tape.mul_row(n, g);
        tape.add_row(h, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; one instance per parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
