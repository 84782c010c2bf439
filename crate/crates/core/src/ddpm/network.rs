//! Four-layer feedforward noise predictor with hand-written backprop.
//!
//! Input row layout: `[q_t (4) ‖ z (n_taxels) ‖ embed(t) (time_dim)]`.
//! Three hidden layers use SiLU; the output layer is linear with 4 outputs.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::sensor::Observation;

pub const POSE_DIM: usize = 4;
pub const DEFAULT_TIME_DIM: usize = 32;
pub const DEFAULT_HIDDEN: usize = 256;
const N_LAYERS: usize = 4;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of an integer diffusion step.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let (s, c) = (t as f64 * freq).sin_cos();
        out[k] = s;
        out[half + k] = c;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in × out`, so a batch propagates as `x · W + b`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: Array2::zeros((n_in, n_out)),
            bias: Array1::zeros(n_out),
        }
    }

    fn uniform<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            weight: Array2::from_shape_simple_fn((n_in, n_out), || dist.sample(rng)),
            bias: Array1::from_shape_simple_fn(n_out, || dist.sample(rng)),
        }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight);
        z += &self.bias;
        z
    }
}

/// `ε_θ(q̃_t, z, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePredictor {
    layers: Vec<Dense>,
    n_taxels: usize,
    time_dim: usize,
}

/// Activations kept from a forward pass for backprop.
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Dense>,
    pub input: Array2<f64>,
}

impl NoisePredictor {
    pub fn new<R: Rng + ?Sized>(
        n_taxels: usize,
        hidden: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::check_dims(n_taxels, hidden, time_dim)?;
        let dims = Self::dims_for(n_taxels, hidden, time_dim);
        let layers = dims
            .windows(2)
            .map(|w| Dense::uniform(w[0], w[1], rng))
            .collect();
        Ok(Self {
            layers,
            n_taxels,
            time_dim,
        })
    }

    /// Network with every weight and bias set to zero.
    pub fn zeros(n_taxels: usize, hidden: usize, time_dim: usize) -> Result<Self> {
        Self::check_dims(n_taxels, hidden, time_dim)?;
        let dims = Self::dims_for(n_taxels, hidden, time_dim);
        Ok(Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            n_taxels,
            time_dim,
        })
    }

    fn check_dims(n_taxels: usize, hidden: usize, time_dim: usize) -> Result<()> {
        if n_taxels == 0 || hidden == 0 || time_dim == 0 || !time_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "bad network dims: n_taxels={n_taxels}, hidden={hidden}, time_dim={time_dim} (even)"
            )));
        }
        Ok(())
    }

    fn dims_for(n_taxels: usize, hidden: usize, time_dim: usize) -> [usize; N_LAYERS + 1] {
        [
            POSE_DIM + n_taxels + time_dim,
            hidden,
            hidden,
            hidden,
            POSE_DIM,
        ]
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.nrows()];
        d.extend(self.layers.iter().map(|l| l.weight.ncols()));
        d
    }

    pub fn n_taxels(&self) -> usize {
        self.n_taxels
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn input_dim(&self) -> usize {
        POSE_DIM + self.n_taxels + self.time_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    /// Flat parameters: per layer, weights row-major (`in × out`) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Assembles one input row.
    pub fn input_row(&self, q_t: &[f64; 4], z: &Observation, t: usize) -> Result<Vec<f64>> {
        if z.len() != self.n_taxels {
            return Err(Error::InvalidArgument(format!(
                "observation has {} taxels, model expects {}",
                z.len(),
                self.n_taxels
            )));
        }
        let mut row = Vec::with_capacity(self.input_dim());
        row.extend_from_slice(q_t);
        row.extend_from_slice(&z.activations);
        row.extend(time_embedding(t, self.time_dim));
        Ok(row)
    }

    /// Single-input forward pass.
    pub fn predict_noise(&self, q_t: &[f64; 4], z: &Observation, t: usize) -> Result<[f64; 4]> {
        let row = self.input_row(q_t, z, t)?;
        let x = Array2::from_shape_vec((1, row.len()), row).expect("row length matches");
        let y = self.forward(&x);
        Ok(std::array::from_fn(|k| y[[0, k]]))
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.view().to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&h.view());
            if i + 1 < N_LAYERS {
                z.mapv_inplace(silu);
            }
            h = z;
        }
        h
    }

    pub fn forward_cached(&self, x: Array2<f64>) -> (Array2<f64>, ForwardCache) {
        let mut inputs = Vec::with_capacity(N_LAYERS);
        let mut pre = Vec::with_capacity(N_LAYERS - 1);
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h.view());
            inputs.push(h);
            if i + 1 < N_LAYERS {
                h = z.mapv(silu);
                pre.push(z);
            } else {
                h = z;
            }
        }
        (h, ForwardCache { inputs, pre })
    }

    /// Gradients of a scalar loss given `d_out = ∂L/∂output`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> Gradients {
        let mut grads: Vec<Dense> = Vec::with_capacity(N_LAYERS);
        let mut delta = d_out.clone();
        for i in (0..N_LAYERS).rev() {
            let a = &cache.inputs[i];
            let weight = a.t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            grads.push(Dense { weight, bias });
            let mut d_in = delta.dot(&self.layers[i].weight.t());
            if i > 0 {
                Zip::from(&mut d_in)
                    .and(&cache.pre[i - 1])
                    .for_each(|d, &z| *d *= silu_grad(z));
            }
            delta = d_in;
        }
        grads.reverse();
        Gradients {
            layers: grads,
            input: delta,
        }
    }

    /// Batched forward pass where every row shares the same conditioning
    /// suffix `[z ‖ embed(t)]`. The shared part of the first layer is folded
    /// into one bias row, so only the pose columns are multiplied per row.
    pub(crate) fn forward_shared_condition(&self, poses: &Array2<f64>, cond: &[f64]) -> Array2<f64> {
        let first = &self.layers[0];
        let w_pose = first.weight.slice(s![..POSE_DIM, ..]);
        let w_cond = first.weight.slice(s![POSE_DIM.., ..]);
        let cond = ndarray::ArrayView1::from(cond);
        let shared = cond.dot(&w_cond) + &first.bias;
        let mut h = poses.dot(&w_pose);
        h += &shared;
        h.mapv_inplace(silu);
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let mut z = layer.forward(&h.view());
            if i + 1 < N_LAYERS {
                z.mapv_inplace(silu);
            }
            h = z;
        }
        h
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub(crate) fn from_parts(layers: Vec<Dense>, n_taxels: usize, time_dim: usize) -> Self {
        Self {
            layers,
            n_taxels,
            time_dim,
        }
    }
}

pub fn predict_noise(
    model: &NoisePredictor,
    q_t: &[f64; 4],
    z: &Observation,
    t: usize,
) -> Result<[f64; 4]> {
    model.predict_noise(q_t, z, t)
}

/// Adaptive-moment optimizer over the network's parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    pub fn new(net: &NoisePredictor, lr: f64) -> Self {
        let zeros = || {
            net.layers
                .iter()
                .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, net: &mut NoisePredictor, grads: &Gradients) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.lr;
        for (((layer, g), m), v) in net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let apply = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| apply(p, g, m, v));
            Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| apply(p, g, m, v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn obs(n: usize) -> Observation {
        Observation::new((0..n).map(|i| (i as f64 * 0.37).fract()).collect()).unwrap()
    }

    #[test]
    fn zero_network_predicts_zero() {
        let net = NoisePredictor::zeros(8, 16, 8).unwrap();
        let out = net.predict_noise(&[0.1, 0.2, 0.3, 0.4], &obs(8), 5).unwrap();
        assert_eq!(out, [0.0; 4]);
    }

    #[test]
    fn four_weight_layers() {
        let net = NoisePredictor::new(16, 32, 8, &mut seeded(1)).unwrap();
        assert_eq!(net.layers().len(), 4);
        assert_eq!(net.layer_dims(), vec![4 + 16 + 8, 32, 32, 32, 4]);
        assert!(NoisePredictor::new(16, 32, 7, &mut seeded(1)).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let net = NoisePredictor::new(8, 16, 8, &mut seeded(2)).unwrap();
        let q = [0.5, -0.1, 0.9, 0.2];
        let a = net.predict_noise(&q, &obs(8), 42).unwrap();
        let b = net.predict_noise(&q, &obs(8), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = NoisePredictor::new(8, 16, 8, &mut seeded(2)).unwrap();
        assert!(net.predict_noise(&[0.0; 4], &obs(9), 1).is_err());
    }

    #[test]
    fn shared_condition_path_matches_plain_forward() {
        let net = NoisePredictor::new(6, 24, 8, &mut seeded(3)).unwrap();
        let z = obs(6);
        let t = 17;
        let poses = Array2::from_shape_fn((5, 4), |(i, k)| (i * 4 + k) as f64 * 0.1 - 1.0);
        let mut cond = z.activations.clone();
        cond.extend(time_embedding(t, 8));
        let fast = net.forward_shared_condition(&poses, &cond);
        for i in 0..5 {
            let q: [f64; 4] = std::array::from_fn(|k| poses[[i, k]]);
            let slow = net.predict_noise(&q, &z, t).unwrap();
            for k in 0..4 {
                assert!((fast[[i, k]] - slow[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn params_round_trip() {
        let a = NoisePredictor::new(5, 7, 4, &mut seeded(4)).unwrap();
        let mut b = NoisePredictor::zeros(5, 7, 4).unwrap();
        b.set_params(&a.params()).unwrap();
        assert_eq!(a, b);
        assert!(b.set_params(&[0.0; 3]).is_err());
    }

    #[test]
    fn time_embedding_layout() {
        let e = time_embedding(0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        let e = time_embedding(3, 8);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[4] - 3f64.cos()).abs() < 1e-15);
    }
}
