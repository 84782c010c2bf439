//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"TPDDPM\0\0"
//! 8       4     schema version, u32 little-endian
//! 12      4     header length L, u32 little-endian
//! 16      L     header, UTF-8 JSON (see `CheckpointHeader`)
//! 16+L    8·P   parameters, f64 little-endian
//! ```
//!
//! Parameters are laid out layer by layer, each as its `in × out` weight
//! matrix in row-major order followed by its `out` biases. `P` equals
//! `header.param_count`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Dense, NoisePredictor};
use super::schedule::NoiseSchedule;
use super::{DiffusionModel, ModelInfo, Standardization};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TPDDPM\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub layer_dims: Vec<usize>,
    pub n_taxels: usize,
    pub time_dim: usize,
    pub standardization: Standardization,
    pub train_seed: u64,
    pub object: String,
    pub sensor_hash: String,
    pub param_count: usize,
}

impl DiffusionModel {
    pub fn header(&self) -> CheckpointHeader {
        let (beta_start, beta_end) = self.schedule.beta_range();
        CheckpointHeader {
            schema_version: CHECKPOINT_VERSION,
            steps: self.schedule.steps(),
            beta_start,
            beta_end,
            layer_dims: self.net.layer_dims(),
            n_taxels: self.net.n_taxels(),
            time_dim: self.net.time_dim(),
            standardization: self.standardization,
            train_seed: self.info.train_seed,
            object: self.info.object.clone(),
            sensor_hash: self.info.sensor_hash.clone(),
            param_count: self.net.param_count(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let params = self.net.params();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::IncompatibleCheckpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "schema version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("header: {e}")))?;
        if header.schema_version != CHECKPOINT_VERSION {
            return Err(bad("header schema version disagrees with preamble"));
        }
        let payload = &bytes[16 + hlen..];
        if payload.len() != 8 * header.param_count {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} parameter bytes, found {}",
                8 * header.param_count,
                payload.len()
            )));
        }
        let params: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let dims = &header.layer_dims;
        if dims.len() != 5
            || dims[0] != 4 + header.n_taxels + header.time_dim
            || dims[4] != 4
            || dims[1] != dims[2]
            || dims[2] != dims[3]
        {
            return Err(Error::IncompatibleCheckpoint(format!(
                "unsupported layer dims {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weight: ndarray::Array2::zeros((w[0], w[1])),
                bias: ndarray::Array1::zeros(w[1]),
            })
            .collect();
        let mut net = NoisePredictor::from_parts(layers, header.n_taxels, header.time_dim);
        net.set_params(&params)
            .map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
        let schedule = NoiseSchedule::linear(header.steps, header.beta_start, header.beta_end)
            .map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
        Ok(Self {
            schedule,
            net,
            standardization: header.standardization,
            info: ModelInfo {
                object: header.object,
                sensor_hash: header.sensor_hash,
                train_seed: header.train_seed,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::IncompatibleCheckpoint(msg) => {
                Error::IncompatibleCheckpoint(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn model() -> DiffusionModel {
        DiffusionModel {
            schedule: NoiseSchedule::default(),
            net: NoisePredictor::new(6, 10, 4, &mut seeded(2)).unwrap(),
            standardization: Standardization {
                mean: [0.1, -0.2, 0.0, 0.01],
                std: [0.05, 0.06, 0.7, 0.71],
            },
            info: ModelInfo {
                object: "box".into(),
                sensor_hash: "abc".into(),
                train_seed: 77,
            },
        }
    }

    #[test]
    fn byte_layout() {
        let m = model();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + hlen + 8 * m.net.param_count());
        let first = f64::from_le_bytes(bytes[16 + hlen..24 + hlen].try_into().unwrap());
        assert_eq!(first, m.net.layers()[0].weight[[0, 0]]);
        assert_eq!(DiffusionModel::from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let mut bytes = model().to_bytes();
        bytes[8] = 9;
        let err = DiffusionModel::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::IncompatibleCheckpoint(_)));
        assert!(err.to_string().contains("incompatible checkpoint"));

        let mut bytes = model().to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(DiffusionModel::from_bytes(&bytes).is_err());
        assert!(DiffusionModel::from_bytes(b"nonsense").is_err());
    }
}
