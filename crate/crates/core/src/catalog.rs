//! Named shape catalog.
//!
//! A catalog is a TOML document with one `[[shape]]` table per entry:
//!
//! ```toml
//! [[shape]]
//! name = "box"
//! kind = "box"          # circle | box | convex_polygon | union
//! half_w = 0.04
//! half_h = 0.025
//!
//! [[shape]]
//! name = "tee"
//! kind = "union"
//! [[shape.children]]
//! kind = "box"
//! half_w = 0.04
//! half_h = 0.01
//! pose = [0.0, 0.01, 0.0]   # x, y, θ (radians) in the parent frame
//! ```
//!
//! Circles take `radius`, polygons take counter-clockwise `vertices` as
//! `[x, y]` pairs. All lengths are in meters. Names may contain ASCII
//! letters, digits, `_` and `-`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PlanarPose, Shape, Vec2};
use crate::io::read_to_string;

const BUILTIN: &str = include_str!("../../../catalog/shapes.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeSpec {
    Circle { radius: f64 },
    Box { half_w: f64, half_h: f64 },
    ConvexPolygon { vertices: Vec<[f64; 2]> },
    Union { children: Vec<ChildSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildSpec {
    #[serde(default)]
    pub pose: [f64; 3],
    #[serde(flatten)]
    pub shape: ShapeSpec,
}

impl ShapeSpec {
    pub fn build(&self) -> Result<Shape> {
        match self {
            ShapeSpec::Circle { radius } => Shape::circle(*radius),
            ShapeSpec::Box { half_w, half_h } => Shape::rect(*half_w, *half_h),
            ShapeSpec::ConvexPolygon { vertices } => {
                Shape::convex_polygon(vertices.iter().map(|&[x, y]| Vec2::new(x, y)).collect())
            }
            ShapeSpec::Union { children } => Shape::union(
                children
                    .iter()
                    .map(|c| {
                        let [x, y, theta] = c.pose;
                        Ok((PlanarPose::from_angle(x, y, theta), c.shape.build()?))
                    })
                    .collect::<Result<_>>()?,
            ),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ShapeSpec::Circle { .. } => "circle",
            ShapeSpec::Box { .. } => "box",
            ShapeSpec::ConvexPolygon { .. } => "convex_polygon",
            ShapeSpec::Union { .. } => "union",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    #[serde(flatten)]
    pub spec: ShapeSpec,
}

#[derive(Debug, Deserialize)]
struct CatalogFile {
    #[serde(default)]
    shape: Vec<CatalogEntry>,
}

#[derive(Debug, Clone)]
pub struct Catalog {
    entries: Vec<(CatalogEntry, Shape)>,
}

pub fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Catalog {
    pub fn parse(text: &str) -> Result<Self> {
        let file: CatalogFile = toml::from_str(text).map_err(|e| Error::Config(format!("catalog: {e}")))?;
        let mut entries: Vec<(CatalogEntry, Shape)> = Vec::with_capacity(file.shape.len());
        for entry in file.shape {
            if !valid_name(&entry.name) {
                return Err(Error::Config(format!("invalid shape name {:?}", entry.name)));
            }
            if entries.iter().any(|(e, _)| e.name == entry.name) {
                return Err(Error::Config(format!("duplicate shape name {:?}", entry.name)));
            }
            let shape = entry.spec.build().map_err(|e| {
                Error::Config(format!("shape {:?}: {e}", entry.name))
            })?;
            entries.push((entry, shape));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// The catalog shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("builtin catalog is valid")
    }

    pub fn load_or_builtin(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::builtin()), Self::load)
    }

    pub fn get(&self, name: &str) -> Result<&Shape> {
        self.entries
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(_, s)| s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown object {name:?}; catalog has {}",
                    self.names().collect::<Vec<_>>().join(", ")
                ))
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(e, _)| e.name.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&CatalogEntry, &Shape)> {
        self.entries.iter().map(|(e, s)| (e, s))
    }
}
