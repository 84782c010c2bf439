//! Ring of taxels on a cylindrical end-effector cross-section.
//!
//! Activation law: a taxel at signed distance `d` from the object surface reads
//! `clamp((ρ − d) / (ρ + δ_sat), 0, 1)`, where `ρ` is the proximity range and
//! `δ_sat` the penetration depth at which the taxel saturates. This is a
//! stand-in for a capacitive skin response; it is isolated in
//! [`observe`] so another law can be dropped in.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{posed_sdf_eval, PlanarPose, Shape, Vec2};

/// Sensor parameters as they appear in config files and dataset headers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub radius: f64,
    pub n_taxels: usize,
    pub rho: f64,
    pub noise_std: f64,
    /// Penetration at which activations saturate; defaults to `rho`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saturation_depth: Option<f64>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            radius: 0.05,
            n_taxels: 32,
            rho: 0.005,
            noise_std: 0.02,
            saturation_depth: None,
        }
    }
}

impl SensorConfig {
    pub fn with_taxels(mut self, n_taxels: usize) -> Self {
        self.n_taxels = n_taxels;
        self
    }

    /// Short provenance hash over the exact parameter bits.
    pub fn hash(&self) -> String {
        let canonical = format!(
            "radius={:016x};n_taxels={};rho={:016x};noise_std={:016x};saturation={:016x}",
            self.radius.to_bits(),
            self.n_taxels,
            self.rho.to_bits(),
            self.noise_std.to_bits(),
            self.saturation_depth.unwrap_or(self.rho).to_bits(),
        );
        hex_prefix(&Sha256::digest(canonical.as_bytes()), 8)
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct TaxelArray {
    config: SensorConfig,
    positions: Vec<Vec2>,
    normals: Vec<Vec2>,
    shape: Shape,
}

/// Taxel `i` sits at angle `2πi/n` on a circle of `radius`, normals radial.
pub fn build_array(radius: f64, n_taxels: usize, rho: f64, noise_std: f64) -> Result<TaxelArray> {
    TaxelArray::new(SensorConfig {
        radius,
        n_taxels,
        rho,
        noise_std,
        saturation_depth: None,
    })
}

impl TaxelArray {
    pub fn new(config: SensorConfig) -> Result<Self> {
        let SensorConfig {
            radius,
            n_taxels,
            rho,
            noise_std,
            saturation_depth,
        } = config;
        if n_taxels < 4 {
            return Err(Error::InvalidArgument(format!(
                "taxel array needs at least 4 taxels, got {n_taxels}"
            )));
        }
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
        }
        if !(noise_std.is_finite() && noise_std >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise_std must be non-negative, got {noise_std}"
            )));
        }
        if let Some(d) = saturation_depth {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "saturation depth must be positive, got {d}"
                )));
            }
        }
        let shape = Shape::circle(radius).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let normals: Vec<Vec2> = (0..n_taxels)
            .map(|i| {
                let (s, c) = (TAU * i as f64 / n_taxels as f64).sin_cos();
                Vec2::new(c, s)
            })
            .collect();
        let positions = normals.iter().map(|n| *n * radius).collect();
        Ok(Self {
            config,
            positions,
            normals,
            shape,
        })
    }

    pub fn config(&self) -> &SensorConfig {
        &self.config
    }

    pub fn n_taxels(&self) -> usize {
        self.positions.len()
    }

    pub fn radius(&self) -> f64 {
        self.config.radius
    }

    pub fn positions(&self) -> &[Vec2] {
        &self.positions
    }

    pub fn normals(&self) -> &[Vec2] {
        &self.normals
    }

    /// The sensor body as a shape centered at the sensor-frame origin.
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn saturation_depth(&self) -> f64 {
        self.config.saturation_depth.unwrap_or(self.config.rho)
    }

    /// Noiseless activation for a taxel at signed distance `d` from the object.
    #[inline]
    pub fn activation(&self, d: f64) -> f64 {
        let rho = self.config.rho;
        ((rho - d) / (rho + self.saturation_depth())).clamp(0.0, 1.0)
    }
}

/// Taxel activations, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation {
    pub activations: Vec<f64>,
}

impl Observation {
    pub fn new(activations: Vec<f64>) -> Result<Self> {
        if activations
            .iter()
            .any(|a| !a.is_finite() || !(0.0..=1.0).contains(a))
        {
            return Err(Error::InvalidArgument(
                "activations must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Self { activations })
    }

    pub fn len(&self) -> usize {
        self.activations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }

    /// True when at least one taxel reads a nonzero activation.
    pub fn in_contact(&self) -> bool {
        self.activations.iter().any(|&a| a > 0.0)
    }

    pub fn squared_distance(&self, other: &Observation) -> f64 {
        self.activations
            .iter()
            .zip(&other.activations)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Taxel activations produced by `object` at `pose`. With `rng`, Gaussian
/// noise of the array's `noise_std` is added before re-clamping.
pub fn observe<R: Rng + ?Sized>(
    object: &Shape,
    pose: &PlanarPose,
    array: &TaxelArray,
    rng: Option<&mut R>,
) -> Observation {
    let mut activations: Vec<f64> = array
        .positions
        .iter()
        .map(|&p| array.activation(posed_sdf_eval(object, pose, p).value))
        .collect();
    if let Some(rng) = rng {
        let std = array.config.noise_std;
        if std > 0.0 {
            let noise = Normal::new(0.0, std).expect("noise std validated at construction");
            for a in &mut activations {
                *a = (*a + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    Observation { activations }
}

/// [`observe`] without noise.
pub fn observe_noiseless(object: &Shape, pose: &PlanarPose, array: &TaxelArray) -> Observation {
    observe::<rand_chacha::ChaCha8Rng>(object, pose, array, None)
}
