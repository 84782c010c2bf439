//! Planar tactile pose estimation.
//!
//! The pipeline synthesizes object–sensor contact configurations by projecting
//! random poses along a signed distance gradient, simulates a ring of taxels
//! around a cylindrical end-effector, trains a conditional denoising diffusion
//! model that samples object poses given taxel activations, and injects those
//! samples into a particle filter.

pub mod catalog;
pub mod contact;
pub mod dataset;
pub mod ddpm;
pub mod error;
pub mod eval;
pub mod filter;
pub mod geometry;
pub mod io;
pub mod rng;
pub mod sensor;

pub use error::{Error, Result};
pub use geometry::{PlanarPose, SdfSample, Shape, ShapeKind, Vec2};
pub use sensor::{Observation, SensorConfig, TaxelArray};
