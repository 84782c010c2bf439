//! Line-delimited JSON dataset files.
//!
//! The first line is a [`DatasetHeader`]; every following line is one record
//! `{"pose": [x, y, c, s], "obs": [a_1, …, a_N], "delta": δ}`.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contact::{ContactRecord, Rejections, SynthesisConfig};
use crate::error::{Error, Result};
use crate::geometry::PlanarPose;
use crate::io::{read_to_string, write_atomic};
use crate::sensor::{Observation, SensorConfig};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub object: String,
    pub sensor_hash: String,
    pub seed: u64,
    pub n_records: usize,
    pub sensor: SensorConfig,
    pub synthesis: SynthesisConfig,
    pub rejections: Rejections,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    pose: [f64; 4],
    obs: Vec<f64>,
    delta: f64,
}

pub fn to_bytes(header: &DatasetHeader, records: &[ContactRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, header).expect("header serializes");
    out.push(b'\n');
    for r in records {
        let line = Line {
            pose: r.pose.to_array(),
            obs: r.observation.activations.clone(),
            delta: r.delta,
        };
        serde_json::to_writer(&mut out, &line).expect("record serializes");
        writeln!(out).expect("writing to a vector");
    }
    out
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, records: &[ContactRecord]) -> Result<()> {
    write_atomic(path, &to_bytes(header, records))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<ContactRecord>)> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty dataset file"))?;
    let header: DatasetHeader =
        serde_json::from_str(first).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::format(
            path,
            format!(
                "dataset schema version {} is not supported (expected {DATASET_SCHEMA_VERSION})",
                header.schema_version
            ),
        ));
    }
    let mut records = Vec::with_capacity(header.n_records);
    for (i, line) in lines {
        let at = |msg: String| Error::format(path, format!("line {}: {msg}", i + 1));
        let l: Line = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        if l.obs.len() != header.sensor.n_taxels {
            return Err(at(format!(
                "{} activations, header declares {} taxels",
                l.obs.len(),
                header.sensor.n_taxels
            )));
        }
        let [x, y, c, s] = l.pose;
        records.push(ContactRecord {
            pose: PlanarPose::new(x, y, c, s),
            observation: Observation::new(l.obs).map_err(|e| at(e.to_string()))?,
            delta: l.delta,
        });
    }
    if records.len() != header.n_records {
        return Err(Error::format(
            path,
            format!("{} records, header declares {}", records.len(), header.n_records),
        ));
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::synthesize_dataset;
    use crate::geometry::Shape;
    use crate::sensor::TaxelArray;

    #[test]
    fn round_trip_is_exact() {
        let sensor = SensorConfig::default().with_taxels(8);
        let array = TaxelArray::new(sensor).unwrap();
        let cfg = SynthesisConfig::new(20, array.radius(), 5);
        let syn = synthesize_dataset(&Shape::rect(0.04, 0.025).unwrap(), &array, &cfg).unwrap();
        let header = DatasetHeader {
            schema_version: DATASET_SCHEMA_VERSION,
            object: "box".into(),
            sensor_hash: sensor.hash(),
            seed: 5,
            n_records: syn.records.len(),
            sensor,
            synthesis: cfg,
            rejections: syn.rejections,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &header, &syn.records).unwrap();
        let (h, recs) = read_dataset(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(recs, syn.records);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"schema_version\":1", "\"schema_version\":7")).unwrap();
        assert!(read_dataset(&path).is_err());
        let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, truncated).unwrap();
        assert!(read_dataset(&path).is_err());
    }
}
