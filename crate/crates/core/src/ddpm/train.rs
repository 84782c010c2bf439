use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::network::{time_embedding, Adam, NoisePredictor, DEFAULT_HIDDEN, DEFAULT_TIME_DIM, POSE_DIM};
use super::schedule::{diffuse_with, NoiseSchedule};
use super::{DiffusionModel, ModelInfo, Standardization};
use crate::contact::ContactRecord;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden_width: usize,
    pub time_dim: usize,
    /// Independent `(t, ε)` draws per record in each minibatch.
    pub noise_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
            hidden_width: DEFAULT_HIDDEN,
            time_dim: DEFAULT_TIME_DIM,
            noise_draws: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_width == 0 || self.noise_draws == 0 {
            return Err(Error::Config(
                "epochs, batch_size, hidden_width and noise_draws must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: DiffusionModel,
    /// Mean noise-prediction MSE per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Fits the noise predictor by minimizing the MSE between sampled and
/// predicted noise at uniformly drawn diffusion steps.
pub fn train(
    dataset: &[ContactRecord],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    info: ModelInfo,
) -> Result<TrainReport> {
    cfg.validate()?;
    let Some(first) = dataset.first() else {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    };
    let n_taxels = first.observation.len();
    if dataset.iter().any(|r| r.observation.len() != n_taxels) {
        return Err(Error::InvalidArgument(
            "all observations must have the same length".into(),
        ));
    }

    let standardization = Standardization::fit(dataset.iter().map(|r| &r.pose));
    let targets: Vec<[f64; 4]> = dataset
        .iter()
        .map(|r| standardization.forward(&r.pose.to_array()))
        .collect();

    let mut rng = rng::seeded(cfg.seed);
    let mut net = NoisePredictor::new(n_taxels, cfg.hidden_width, cfg.time_dim, &mut rng)?;
    let mut opt = Adam::new(&net, cfg.learning_rate);
    let embeddings: Vec<Vec<f64>> = (0..=sched.steps())
        .map(|t| time_embedding(t, cfg.time_dim))
        .collect();
    let in_dim = net.input_dim();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let draws = cfg.noise_draws;
            let b = batch.len() * draws;
            let mut x = Array2::<f64>::zeros((b, in_dim));
            let mut eps = Array2::<f64>::zeros((b, POSE_DIM));
            let rows = batch.iter().flat_map(|&idx| std::iter::repeat_n(idx, draws));
            for (row, idx) in rows.enumerate() {
                let t = rng.random_range(1..=sched.steps());
                let noise: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let xt = diffuse_with(sched.alpha_bar(t), &targets[idx], &noise);
                let mut r = x.row_mut(row);
                for k in 0..POSE_DIM {
                    r[k] = xt[k];
                    eps[[row, k]] = noise[k];
                }
                for (k, a) in dataset[idx].observation.activations.iter().enumerate() {
                    r[POSE_DIM + k] = *a;
                }
                for (k, e) in embeddings[t].iter().enumerate() {
                    r[POSE_DIM + n_taxels + k] = *e;
                }
            }
            let (pred, cache) = net.forward_cached(x);
            let diff = &pred - &eps;
            let count = (b * POSE_DIM) as f64;
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training loss became {loss} in epoch {epoch}; \
                     learning rate {} is probably too high",
                    cfg.learning_rate
                )));
            }
            epoch_sum += loss * batch.len() as f64;
            let d_out = diff * (2.0 / count);
            let grads = net.backward(&cache, &d_out);
            opt.update(&mut net, &grads);
        }
        epoch_losses.push(epoch_sum / dataset.len() as f64);
    }

    Ok(TrainReport {
        model: DiffusionModel {
            schedule: sched.clone(),
            net,
            standardization,
            info: ModelInfo {
                train_seed: cfg.seed,
                ..info
            },
        },
        epoch_losses,
    })
}

/// Monte-Carlo estimate of the noise-prediction MSE of `model` on `dataset`,
/// averaging `draws` random `(t, ε)` pairs per record.
pub fn expected_loss(
    model: &DiffusionModel,
    dataset: &[ContactRecord],
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::seeded(seed);
    let sched = &model.schedule;
    let mut sum = 0.0;
    let mut n = 0usize;
    for rec in dataset {
        let q0 = model.standardization.forward(&rec.pose.to_array());
        for _ in 0..draws {
            let t = rng.random_range(1..=sched.steps());
            let noise: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let xt = diffuse_with(sched.alpha_bar(t), &q0, &noise);
            let pred = model.net.predict_noise(&xt, &rec.observation, t)?;
            sum += (0..POSE_DIM).map(|k| (pred[k] - noise[k]).powi(2)).sum::<f64>();
            n += POSE_DIM;
        }
    }
    Ok(sum / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PlanarPose;
    use crate::sensor::Observation;

    fn record(x: f64) -> ContactRecord {
        ContactRecord {
            pose: PlanarPose::from_angle(x, 0.06, 0.4),
            observation: Observation::new(vec![0.0, 0.3, 0.8, 0.1]).unwrap(),
            delta: 0.001,
        }
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 3,
            hidden_width: 32,
            time_dim: 8,
            noise_draws: 1,
        }
    }

    #[test]
    fn rejects_empty_and_ragged_datasets() {
        let s = NoiseSchedule::default();
        assert!(train(&[], &s, &small_cfg(1), ModelInfo::default()).is_err());
        let mut bad = record(0.0);
        bad.observation = Observation::new(vec![0.1; 3]).unwrap();
        assert!(train(&[record(0.0), bad], &s, &small_cfg(1), ModelInfo::default()).is_err());
    }

    #[test]
    fn equal_seeds_give_equal_parameters() {
        let s = NoiseSchedule::default();
        let data: Vec<_> = (0..40).map(|i| record(i as f64 * 0.001)).collect();
        let a = train(&data, &s, &small_cfg(3), ModelInfo::default()).unwrap();
        let b = train(&data, &s, &small_cfg(3), ModelInfo::default()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn single_record_is_memorized() {
        let s = NoiseSchedule::default();
        let data = vec![record(0.02)];
        let cfg = TrainConfig {
            batch_size: 1,
            hidden_width: 64,
            learning_rate: 3e-3,
            time_dim: 32,
            noise_draws: 256,
            ..small_cfg(500)
        };
        let r = train(&data, &s, &cfg, ModelInfo::default()).unwrap();
        assert_eq!(r.epoch_losses.len(), 500);
        assert!(*r.epoch_losses.last().unwrap() < 0.05);
        let loss = expected_loss(&r.model, &data, 4000, 1).unwrap();
        assert!(loss < 0.05, "expected loss {loss}");
    }

    #[test]
    fn divergent_learning_rate_aborts() {
        let s = NoiseSchedule::default();
        let data: Vec<_> = (0..8).map(|i| record(i as f64)).collect();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..small_cfg(50)
        };
        assert!(matches!(
            train(&data, &s, &cfg, ModelInfo::default()),
            Err(Error::Numerical(_))
        ));
    }
}
