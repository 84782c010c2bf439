use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of diffusion steps.
pub const DEFAULT_STEPS: usize = 100;
/// Linear β range for [`DEFAULT_STEPS`]. The common `[1e-4, 0.02]` range is
/// tuned for 1000 steps; scaled by `1000 / T` it drives `ᾱ_T` to about 2e-5
/// so the terminal marginal is close to `N(0, I)`.
pub const DEFAULT_BETA_START: f64 = 1e-3;
pub const DEFAULT_BETA_END: f64 = 0.2;

/// Linear variance schedule. Steps are 1-based in the public API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Forward marginal `√ᾱ_t·q0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(
    q0: &[f64; 4],
    t: usize,
    eps: &[f64; 4],
    sched: &NoiseSchedule,
) -> Result<[f64; 4]> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    Ok(diffuse_with(ab, q0, eps))
}

#[inline]
pub(crate) fn diffuse_with(alpha_bar: f64, q0: &[f64; 4], eps: &[f64; 4]) -> [f64; 4] {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    std::array::from_fn(|k| a * q0[k] + b * eps[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn default_has_hundred_steps_and_decays() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 100);
        assert!(s.alpha_bar(100) < 0.05);
        for t in 1..100 {
            assert!(s.beta(t) > 0.0 && s.beta(t + 1) >= s.beta(t));
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
    }

    #[test]
    fn single_step() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
    }

    #[test]
    fn unscaled_linear_range_product() {
        // 40-digit product of (1 − β_t) computed offline.
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(100) - 0.363_563_248_055_491_9).abs() < 1e-12);
    }

    #[test]
    fn invalid_ranges() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.01, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_identities() {
        let s = NoiseSchedule::default();
        let q = [0.3, -1.2, 0.6, 0.8];
        let out = forward_diffuse(&q, 7, &[0.0; 4], &s).unwrap();
        for k in 0..4 {
            assert!((out[k] - s.alpha_bar(7).sqrt() * q[k]).abs() < 1e-15);
        }
        assert_eq!(diffuse_with(1.0, &q, &[5.0; 4]), q);
        assert!(forward_diffuse(&q, 0, &[0.0; 4], &s).is_err());
        assert!(forward_diffuse(&q, 101, &[0.0; 4], &s).is_err());
    }

    #[test]
    fn terminal_marginal_is_standard_normal() {
        let s = NoiseSchedule::default();
        let mut rng = seeded(99);
        let n = 100_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let e: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let x = forward_diffuse(&q, 100, &e, &s).unwrap();
            for k in 0..4 {
                sum[k] += x[k];
                sq[k] += x[k] * x[k];
            }
        }
        for k in 0..4 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            assert!(mean.abs() <= 0.02, "mean {mean}");
            assert!((0.97..=1.03).contains(&var), "var {var}");
        }
    }
}
