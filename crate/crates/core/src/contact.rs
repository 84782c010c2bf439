//! Contact configuration synthesis.
//!
//! A random object pose is translated along the object–sensor separation
//! gradient so that the object penetrates the sensor by a sampled depth `δ`:
//! `t = −(σ + δ)·∇σ/‖∇σ‖`, orientation unchanged.
//!
//! `σ` here is the separation between the posed object and the sensor body,
//! measured as the minimum sensor SDF over sampled object boundary points.
//! Zero means touching; `−δ` means penetrating by `δ`.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PlanarPose, SdfSample, Shape, ShapeKind, Vec2};
use crate::rng;
use crate::sensor::{observe_noiseless, Observation, TaxelArray};

/// Object boundary samples used by [`pose_distance`].
pub const POSE_DISTANCE_SAMPLES: usize = 256;

/// Residual `|σ + δ|` accepted after projection.
pub const PROJECTION_TOLERANCE: f64 = 1e-4;

/// Attempts allowed per dataset record before synthesis gives up.
const MAX_ATTEMPTS_PER_RECORD: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum ProjectionError {
    #[error("separation gradient is degenerate; resample the pose")]
    DegenerateGradient,
    #[error("residual {residual:.3e} m after {reprojections} re-projections")]
    BudgetExhausted { reprojections: usize, residual: f64 },
}

/// Object shape paired with a sensor body, with the object boundary cached.
#[derive(Debug, Clone)]
pub struct ContactModel {
    object: Shape,
    sensor: Shape,
    boundary: Vec<Vec2>,
}

impl ContactModel {
    pub fn new(object: Shape, sensor: Shape) -> Result<Self> {
        let boundary = object.boundary_points(POSE_DISTANCE_SAMPLES)?;
        Ok(Self {
            object,
            sensor,
            boundary,
        })
    }

    pub fn object(&self) -> &Shape {
        &self.object
    }

    pub fn sensor(&self) -> &Shape {
        &self.sensor
    }

    /// Separation between the object at `pose` and the sensor, with the
    /// translation direction of steepest separation increase. Exact for
    /// circular objects; otherwise sampled over the object boundary.
    pub fn pose_distance(&self, pose: &PlanarPose) -> SdfSample {
        // A disc's separation from any body is the body's SDF at its center
        // minus its radius.
        if let ShapeKind::Circle { radius } = self.object.kind() {
            let s = self.sensor.sdf(pose.translation());
            return SdfSample {
                value: s.value - radius,
                ..s
            };
        }
        let mut best = SdfSample {
            value: f64::INFINITY,
            gradient: Vec2::X,
            degenerate: true,
        };
        for &p in &self.boundary {
            let s = self.sensor.sdf(pose.transform_point(p));
            if s.value < best.value {
                best = s;
            }
        }
        best
    }

    /// Translates `pose_init` into contact with penetration `delta`.
    pub fn project(
        &self,
        pose_init: &PlanarPose,
        delta: f64,
        max_reprojections: usize,
    ) -> Result<PlanarPose, ProjectionError> {
        let mut pose = *pose_init;
        let mut sep = self.pose_distance(&pose);
        let mut reprojections = 0;
        loop {
            if sep.degenerate {
                return Err(ProjectionError::DegenerateGradient);
            }
            let step = sep.gradient * (-(sep.value + delta) / sep.gradient.norm());
            pose = pose.translated(step);
            sep = self.pose_distance(&pose);
            let residual = (sep.value + delta).abs();
            if residual <= PROJECTION_TOLERANCE {
                return Ok(pose);
            }
            if reprojections >= max_reprojections {
                return Err(ProjectionError::BudgetExhausted {
                    reprojections,
                    residual,
                });
            }
            reprojections += 1;
        }
    }
}

/// Separation of `object` at `object_pose` from `sensor` at the origin.
pub fn pose_distance(object: &Shape, object_pose: &PlanarPose, sensor: &Shape) -> Result<SdfSample> {
    Ok(ContactModel::new(object.clone(), sensor.clone())?.pose_distance(object_pose))
}

pub fn project_to_contact(
    object: &Shape,
    pose_init: &PlanarPose,
    sensor: &Shape,
    delta: f64,
    max_reprojections: usize,
) -> Result<Result<PlanarPose, ProjectionError>> {
    Ok(ContactModel::new(object.clone(), sensor.clone())?.project(
        pose_init,
        delta,
        max_reprojections,
    ))
}

/// Axis-aligned sampling region for object positions (sensor frame, meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    /// `[−3R, 3R]²` around a sensor of radius `R`.
    pub fn around_sensor(radius: f64) -> Self {
        let h = 3.0 * radius;
        Self {
            x_min: -h,
            x_max: h,
            y_min: -h,
            y_max: h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_max > self.x_min
            && self.y_max > self.y_min;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("degenerate sampling bounds {self:?}")))
        }
    }

    /// Uniform position in the box, uniform heading in `[−π, π)`.
    pub fn sample_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> PlanarPose {
        let x = rng.random_range(self.x_min..self.x_max);
        let y = rng.random_range(self.y_min..self.y_max);
        let theta = rng.random_range(-PI..PI);
        PlanarPose::from_angle(x, y, theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub n_samples: usize,
    pub delta_max: f64,
    pub bounds: Bounds,
    pub seed: u64,
    pub max_reprojections: usize,
}

impl SynthesisConfig {
    pub fn new(n_samples: usize, sensor_radius: f64, seed: u64) -> Self {
        Self {
            n_samples,
            delta_max: 0.005,
            bounds: Bounds::around_sensor(sensor_radius),
            seed,
            max_reprojections: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        if !(self.delta_max.is_finite() && self.delta_max >= 0.0) {
            return Err(Error::Config(format!(
                "delta_max must be non-negative, got {}",
                self.delta_max
            )));
        }
        self.bounds.validate()
    }
}

/// One state–observation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactRecord {
    pub pose: PlanarPose,
    pub observation: Observation,
    pub delta: f64,
}

/// Why a candidate contact was discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Rejections {
    pub inside_start: usize,
    pub degenerate: usize,
    pub budget_exhausted: usize,
    pub no_activation: usize,
}

impl Rejections {
    pub fn total(&self) -> usize {
        self.inside_start + self.degenerate + self.budget_exhausted + self.no_activation
    }

    fn add(&mut self, o: &Rejections) {
        self.inside_start += o.inside_start;
        self.degenerate += o.degenerate;
        self.budget_exhausted += o.budget_exhausted;
        self.no_activation += o.no_activation;
    }
}

/// Draws contact configurations: uniform pose, separation check, projection.
#[derive(Debug, Clone)]
pub struct ContactSampler {
    pub model: ContactModel,
    pub bounds: Bounds,
    pub delta_max: f64,
    pub max_reprojections: usize,
}

impl ContactSampler {
    pub fn new(object: &Shape, array: &TaxelArray, cfg: &SynthesisConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model: ContactModel::new(object.clone(), array.shape().clone())?,
            bounds: cfg.bounds,
            delta_max: cfg.delta_max,
            max_reprojections: cfg.max_reprojections,
        })
    }

    /// One projection attempt. On failure, the reason is tallied in `rejections`.
    pub fn try_pose<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        rejections: &mut Rejections,
    ) -> Option<(PlanarPose, f64)> {
        let init = self.bounds.sample_pose(rng);
        let delta = if self.delta_max > 0.0 {
            rng.random_range(0.0..=self.delta_max)
        } else {
            0.0
        };
        let sep = self.model.pose_distance(&init);
        if sep.value <= 0.0 {
            rejections.inside_start += 1;
            return None;
        }
        match self.model.project(&init, delta, self.max_reprojections) {
            Ok(pose) => Some((pose, delta)),
            Err(ProjectionError::DegenerateGradient) => {
                rejections.degenerate += 1;
                None
            }
            Err(ProjectionError::BudgetExhausted { .. }) => {
                rejections.budget_exhausted += 1;
                None
            }
        }
    }

    /// A projected pose, retrying until one succeeds.
    pub fn sample_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(PlanarPose, f64)> {
        let mut rej = Rejections::default();
        for _ in 0..MAX_ATTEMPTS_PER_RECORD {
            if let Some(found) = self.try_pose(rng, &mut rej) {
                return Ok(found);
            }
        }
        Err(Error::Config(format!(
            "no contact found in {MAX_ATTEMPTS_PER_RECORD} attempts ({rej:?})"
        )))
    }

    /// A projected pose whose noiseless observation activates at least one taxel.
    pub fn sample_record<R: Rng + ?Sized>(
        &self,
        array: &TaxelArray,
        rng: &mut R,
        rejections: &mut Rejections,
    ) -> Result<ContactRecord> {
        for _ in 0..MAX_ATTEMPTS_PER_RECORD {
            let Some((pose, delta)) = self.try_pose(rng, rejections) else {
                continue;
            };
            let observation = observe_noiseless(self.model.object(), &pose, array);
            if !observation.in_contact() {
                rejections.no_activation += 1;
                continue;
            }
            return Ok(ContactRecord {
                pose,
                observation,
                delta,
            });
        }
        Err(Error::Config(format!(
            "no sensed contact found in {MAX_ATTEMPTS_PER_RECORD} attempts ({rejections:?})"
        )))
    }
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub records: Vec<ContactRecord>,
    pub rejections: Rejections,
}

/// Generates `cfg.n_samples` contact records. Record `i` uses its own random
/// stream, so output is identical regardless of scheduling.
pub fn synthesize_dataset(object: &Shape, array: &TaxelArray, cfg: &SynthesisConfig) -> Result<Synthesis> {
    let sampler = ContactSampler::new(object, array, cfg)?;
    let results: Vec<Result<(ContactRecord, Rejections)>> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, i as u64);
            let mut rej = Rejections::default();
            let rec = sampler.sample_record(array, &mut rng, &mut rej)?;
            Ok((rec, rej))
        })
        .collect();
    let mut records = Vec::with_capacity(cfg.n_samples);
    let mut rejections = Rejections::default();
    for r in results {
        let (rec, rej) = r?;
        records.push(rec);
        rejections.add(&rej);
    }
    if rejections.total() > records.len() {
        return Err(Error::Config(format!(
            "rejection rate above 50% ({} rejected for {} accepted: {rejections:?}); \
             sampling bounds probably lie mostly inside the sensor",
            rejections.total(),
            records.len()
        )));
    }
    Ok(Synthesis {
        records,
        rejections,
    })
}
