//! Conditional denoising diffusion over planar poses.
//!
//! The model learns `p(q | z)`: object poses given taxel activations. Poses
//! are diffused as raw 4-vectors `(x, y, cos θ, sin θ)` in standardized
//! coordinates and projected back onto the unit heading circle only after the
//! last denoising step.

mod checkpoint;
mod network;
mod schedule;
mod train;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{
    predict_noise, time_embedding, Adam, Dense, ForwardCache, Gradients, NoisePredictor,
    DEFAULT_HIDDEN, DEFAULT_TIME_DIM, POSE_DIM,
};
pub use schedule::{
    forward_diffuse, make_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START,
    DEFAULT_STEPS,
};
pub use train::{expected_loss, train, TrainConfig, TrainReport};

use crate::error::Result;
use crate::geometry::PlanarPose;
use crate::rng::{self, StreamRng};
use crate::sensor::Observation;

/// Redraws allowed for a hypothesis whose heading collapses to zero.
const MAX_REDRAWS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("heading vector ({0}, {1}) is too close to zero to normalize")]
pub struct DegenerateSample(pub f64, pub f64);

/// Projects `(x, y, c, s)` onto the pose manifold.
pub fn renormalize_pose(v: &[f64; 4]) -> Result<PlanarPose, DegenerateSample> {
    let n = v[2].hypot(v[3]);
    if !(n > 1e-12) || !v.iter().all(|x| x.is_finite()) {
        return Err(DegenerateSample(v[2], v[3]));
    }
    Ok(PlanarPose::new(v[0], v[1], v[2] / n, v[3] / n))
}

/// Per-dimension affine map between poses and unit-scale diffusion space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl Standardization {
    pub const IDENTITY: Standardization = Standardization {
        mean: [0.0; 4],
        std: [1.0; 4],
    };

    pub fn fit<'a>(poses: impl IntoIterator<Item = &'a PlanarPose>) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for p in poses {
            let v = p.to_array();
            n += 1;
            for k in 0..4 {
                sum[k] += v[k];
                sq[k] += v[k] * v[k];
            }
        }
        if n == 0 {
            return Self::IDENTITY;
        }
        let mean: [f64; 4] = std::array::from_fn(|k| sum[k] / n as f64);
        let std = std::array::from_fn(|k| {
            let var = (sq[k] / n as f64 - mean[k] * mean[k]).max(0.0);
            if var.sqrt() > 1e-9 {
                var.sqrt()
            } else {
                1.0
            }
        });
        Self { mean, std }
    }

    pub fn forward(&self, v: &[f64; 4]) -> [f64; 4] {
        std::array::from_fn(|k| (v[k] - self.mean[k]) / self.std[k])
    }

    pub fn inverse(&self, v: &[f64; 4]) -> [f64; 4] {
        std::array::from_fn(|k| v[k] * self.std[k] + self.mean[k])
    }
}

/// Provenance carried alongside a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelInfo {
    pub object: String,
    pub sensor_hash: String,
    pub train_seed: u64,
}

/// Trained inverse observation model.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub net: NoisePredictor,
    pub standardization: Standardization,
    pub info: ModelInfo,
}

impl DiffusionModel {
    pub fn n_taxels(&self) -> usize {
        self.net.n_taxels()
    }

    /// `s` pose hypotheses for observation `z`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        z: &Observation,
        s: usize,
        rng: &mut R,
    ) -> Result<Vec<PlanarPose>> {
        sample(self, z, s, rng)
    }
}

/// Ancestral sampling of `s` hypotheses, `t = T, …, 1`, from `N(0, I)`.
///
/// Each hypothesis draws its noise from its own stream, derived from one
/// seed taken from `rng`, so a hypothesis does not depend on how many others
/// are generated alongside it.
pub fn sample<R: Rng + ?Sized>(
    model: &DiffusionModel,
    z: &Observation,
    s: usize,
    rng: &mut R,
) -> Result<Vec<PlanarPose>> {
    // Validates the conditioning length.
    model.net.input_row(&[0.0; 4], z, 1)?;
    if s == 0 {
        return Ok(Vec::new());
    }
    let base: u64 = rng.random();
    let mut streams: Vec<StreamRng> = (0..s as u64).map(|i| rng::stream(base, i)).collect();
    let raw = denoise_batch(model, z, &mut streams);
    let mut out = Vec::with_capacity(s);
    for (i, row) in raw.into_iter().enumerate() {
        let mut v = row;
        let mut redraws = 0;
        loop {
            match renormalize_pose(&model.standardization.inverse(&v)) {
                Ok(p) => break out.push(p),
                Err(e) if redraws >= MAX_REDRAWS => {
                    return Err(crate::Error::Numerical(format!(
                        "hypothesis {i} stayed degenerate after {redraws} redraws: {e}"
                    )))
                }
                Err(_) => {
                    redraws += 1;
                    v = denoise_batch(model, z, std::slice::from_mut(&mut streams[i]))[0];
                }
            }
        }
    }
    Ok(out)
}

/// Runs the reverse chain for one row per stream; returns standardized 4-vectors.
fn denoise_batch(model: &DiffusionModel, z: &Observation, streams: &mut [StreamRng]) -> Vec<[f64; 4]> {
    let sched = &model.schedule;
    let n = streams.len();
    let mut x = Array2::<f64>::zeros((n, POSE_DIM));
    for (i, r) in streams.iter_mut().enumerate() {
        for k in 0..POSE_DIM {
            x[[i, k]] = StandardNormal.sample(r);
        }
    }
    let mut cond = Vec::with_capacity(z.len() + model.net.time_dim());
    for t in (1..=sched.steps()).rev() {
        cond.clear();
        cond.extend_from_slice(&z.activations);
        cond.extend(time_embedding(t, model.net.time_dim()));
        let eps = model.net.forward_shared_condition(&x, &cond);
        let (alpha, beta, ab) = (sched.alpha(t), sched.beta(t), sched.alpha_bar(t));
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let eps_coef = beta / (1.0 - ab).sqrt();
        let sigma = beta.sqrt();
        for (i, r) in streams.iter_mut().enumerate() {
            for k in 0..POSE_DIM {
                let mean = inv_sqrt_alpha * (x[[i, k]] - eps_coef * eps[[i, k]]);
                x[[i, k]] = if t > 1 {
                    let zeta: f64 = StandardNormal.sample(r);
                    mean + sigma * zeta
                } else {
                    mean
                };
            }
        }
    }
    (0..n)
        .map(|i| std::array::from_fn(|k| x[[i, k]]))
        .collect()
}
