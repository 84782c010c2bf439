//! Planar shapes, signed distance fields and frame transforms.
//!
//! Distances are in meters, negative inside. Every [`Shape`] is validated at
//! construction, so evaluation is total and never fails.

use std::f64::consts::TAU;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };
    pub const X: Vec2 = Vec2 { x: 1.0, y: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    #[inline]
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Counter-clockwise perpendicular.
    #[inline]
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    #[inline]
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    #[inline]
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Object pose in the sensor frame, with the heading stored as `(cos θ, sin θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub c: f64,
    pub s: f64,
}

impl Default for PlanarPose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl PlanarPose {
    pub const IDENTITY: PlanarPose = PlanarPose {
        x: 0.0,
        y: 0.0,
        c: 1.0,
        s: 0.0,
    };

    pub const fn new(x: f64, y: f64, c: f64, s: f64) -> Self {
        Self { x, y, c, s }
    }

    pub fn from_angle(x: f64, y: f64, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self { x, y, c, s }
    }

    pub fn angle(&self) -> f64 {
        self.s.atan2(self.c)
    }

    pub fn translation(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.c, self.s]
    }

    /// Rescales `(c, s)` onto the unit circle. A zero heading vector is left
    /// untouched; see [`crate::ddpm::renormalize_pose`] for the checked form.
    pub fn renormalize(&mut self) {
        let n = self.c.hypot(self.s);
        if n > 0.0 {
            self.c /= n;
            self.s /= n;
        }
    }

    pub fn renormalized(mut self) -> Self {
        self.renormalize();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.c.is_finite() && self.s.is_finite()
    }

    #[inline]
    pub fn rotate(&self, v: Vec2) -> Vec2 {
        Vec2::new(self.c * v.x - self.s * v.y, self.s * v.x + self.c * v.y)
    }

    #[inline]
    pub fn inverse_rotate(&self, v: Vec2) -> Vec2 {
        Vec2::new(self.c * v.x + self.s * v.y, -self.s * v.x + self.c * v.y)
    }

    /// Maps an object-frame point into the sensor frame.
    #[inline]
    pub fn transform_point(&self, p: Vec2) -> Vec2 {
        self.rotate(p) + self.translation()
    }

    #[inline]
    pub fn inverse_transform_point(&self, p: Vec2) -> Vec2 {
        self.inverse_rotate(p - self.translation())
    }

    pub fn translated(&self, t: Vec2) -> Self {
        Self {
            x: self.x + t.x,
            y: self.y + t.y,
            ..*self
        }
    }

    /// `self ∘ other`: `other` expressed in the frame that `self` maps into.
    pub fn compose(&self, other: &PlanarPose) -> Self {
        let t = self.transform_point(other.translation());
        Self {
            x: t.x,
            y: t.y,
            c: self.c * other.c - self.s * other.s,
            s: self.s * other.c + self.c * other.s,
        }
    }

    pub fn inverse(&self) -> Self {
        let t = self.inverse_rotate(-self.translation());
        Self {
            x: t.x,
            y: t.y,
            c: self.c,
            s: -self.s,
        }
    }
}

/// `R(θ)·p + (x, y)`.
pub fn transform_point(pose: &PlanarPose, p: Vec2) -> Vec2 {
    pose.transform_point(p)
}

/// Signed distance and its spatial gradient at one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfSample {
    pub value: f64,
    pub gradient: Vec2,
    /// Set when the query lies on a medial axis and `gradient` is the fixed
    /// fallback `(1, 0)` rather than a true gradient.
    pub degenerate: bool,
}

impl SdfSample {
    fn regular(value: f64, gradient: Vec2) -> Self {
        Self {
            value,
            gradient,
            degenerate: false,
        }
    }

    fn singular(value: f64) -> Self {
        Self {
            value,
            gradient: Vec2::X,
            degenerate: true,
        }
    }
}

/// A validated planar shape in its own object frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    kind: ShapeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeKind {
    Circle { radius: f64 },
    Box { half_w: f64, half_h: f64 },
    /// Counter-clockwise, strictly convex vertex loop.
    ConvexPolygon { vertices: Vec<Vec2> },
    /// Children placed in the union's frame.
    Union { children: Vec<(PlanarPose, Shape)> },
}

const SINGULAR_EPS: f64 = 1e-12;

impl Shape {
    pub fn circle(radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidShape(format!(
                "circle radius must be positive, got {radius}"
            )));
        }
        Ok(Self {
            kind: ShapeKind::Circle { radius },
        })
    }

    pub fn rect(half_w: f64, half_h: f64) -> Result<Self> {
        if !(half_w.is_finite() && half_h.is_finite() && half_w > 0.0 && half_h > 0.0) {
            return Err(Error::InvalidShape(format!(
                "box half-extents must be positive, got ({half_w}, {half_h})"
            )));
        }
        Ok(Self {
            kind: ShapeKind::Box { half_w, half_h },
        })
    }

    pub fn convex_polygon(vertices: Vec<Vec2>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::InvalidShape(format!(
                "polygon needs at least 3 vertices, got {n}"
            )));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidShape("polygon vertex is not finite".into()));
        }
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if (b - a).norm_sq() == 0.0 {
                return Err(Error::InvalidShape(format!("polygon has repeated vertex {i}")));
            }
            if (b - a).cross(c - b) <= 0.0 {
                return Err(Error::InvalidShape(format!(
                    "polygon is not strictly convex and counter-clockwise at vertex {}",
                    (i + 1) % n
                )));
            }
        }
        // Local left turns everywhere still admit self-intersecting loops that
        // wind more than once; total turning must be exactly one revolution.
        let turning: f64 = (0..n)
            .map(|i| {
                let e0 = vertices[(i + 1) % n] - vertices[i];
                let e1 = vertices[(i + 2) % n] - vertices[(i + 1) % n];
                e0.cross(e1).atan2(e0.dot(e1))
            })
            .sum();
        if (turning - TAU).abs() > 1e-6 {
            return Err(Error::InvalidShape("polygon winds more than once".into()));
        }
        Ok(Self {
            kind: ShapeKind::ConvexPolygon { vertices },
        })
    }

    pub fn union(children: Vec<(PlanarPose, Shape)>) -> Result<Self> {
        if children.is_empty() {
            return Err(Error::InvalidShape("union must have at least one child".into()));
        }
        if children.iter().any(|(p, _)| !p.is_finite()) {
            return Err(Error::InvalidShape("union child pose is not finite".into()));
        }
        let children = children
            .into_iter()
            .map(|(p, s)| (p.renormalized(), s))
            .collect();
        Ok(Self {
            kind: ShapeKind::Union { children },
        })
    }

    pub fn kind(&self) -> &ShapeKind {
        &self.kind
    }

    pub fn is_convex(&self) -> bool {
        !matches!(self.kind, ShapeKind::Union { .. })
    }

    /// Signed distance and gradient at `p` (object frame).
    pub fn sdf(&self, p: Vec2) -> SdfSample {
        match &self.kind {
            ShapeKind::Circle { radius } => {
                let r = p.norm();
                if r < SINGULAR_EPS {
                    SdfSample::singular(r - radius)
                } else {
                    SdfSample::regular(r - radius, p * (1.0 / r))
                }
            }
            ShapeKind::Box { half_w, half_h } => box_sdf(p, *half_w, *half_h),
            ShapeKind::ConvexPolygon { vertices } => polygon_sdf(p, vertices),
            ShapeKind::Union { children } => {
                let mut best: Option<SdfSample> = None;
                for (pose, child) in children {
                    let local = child.sdf(pose.inverse_transform_point(p));
                    if best.is_none_or(|b| local.value < b.value) {
                        best = Some(SdfSample {
                            gradient: pose.rotate(local.gradient),
                            ..local
                        });
                    }
                }
                best.expect("union is non-empty")
            }
        }
    }

    /// Largest distance from the object origin to any point of the shape.
    pub fn bounding_radius(&self) -> f64 {
        match &self.kind {
            ShapeKind::Circle { radius } => *radius,
            ShapeKind::Box { half_w, half_h } => half_w.hypot(*half_h),
            ShapeKind::ConvexPolygon { vertices } => {
                vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
            }
            ShapeKind::Union { children } => children
                .iter()
                .map(|(p, c)| p.translation().norm() + c.bounding_radius())
                .fold(0.0, f64::max),
        }
    }

    /// Boundary length. For unions this counts every child's full boundary.
    pub fn perimeter(&self) -> f64 {
        match &self.kind {
            ShapeKind::Circle { radius } => TAU * radius,
            ShapeKind::Box { half_w, half_h } => 4.0 * (half_w + half_h),
            ShapeKind::ConvexPolygon { vertices } => polygon_perimeter(vertices),
            ShapeKind::Union { children } => children.iter().map(|(_, c)| c.perimeter()).sum(),
        }
    }

    /// `m` points on the boundary, approximately uniform in arc length.
    pub fn boundary_points(&self, m: usize) -> Result<Vec<Vec2>> {
        if m < 3 {
            return Err(Error::InvalidArgument(format!(
                "boundary sampling needs m >= 3, got {m}"
            )));
        }
        Ok(match &self.kind {
            ShapeKind::Circle { radius } => (0..m)
                .map(|k| {
                    let (s, c) = (TAU * k as f64 / m as f64).sin_cos();
                    Vec2::new(radius * c, radius * s)
                })
                .collect(),
            ShapeKind::Box { half_w, half_h } => {
                let (w, h) = (*half_w, *half_h);
                let corners = [
                    Vec2::new(w, -h),
                    Vec2::new(w, h),
                    Vec2::new(-w, h),
                    Vec2::new(-w, -h),
                ];
                loop_points(&corners, m)
            }
            ShapeKind::ConvexPolygon { vertices } => loop_points(vertices, m),
            ShapeKind::Union { .. } => self.union_boundary_points(m)?,
        })
    }

    fn union_boundary_points(&self, m: usize) -> Result<Vec<Vec2>> {
        let ShapeKind::Union { children } = &self.kind else {
            unreachable!()
        };
        let total = self.perimeter();
        let dense = 16 * m;
        let mut exposed = Vec::with_capacity(dense);
        for (pose, child) in children {
            let k = ((dense as f64 * child.perimeter() / total).round() as usize).max(3);
            for p in child.boundary_points(k)? {
                let w = pose.transform_point(p);
                if self.sdf(w).value >= -1e-9 {
                    exposed.push(w);
                }
            }
        }
        if exposed.len() < m {
            return Err(Error::InvalidShape(
                "union exposes too little boundary to sample".into(),
            ));
        }
        let stride = exposed.len() as f64 / m as f64;
        Ok((0..m)
            .map(|k| exposed[(k as f64 * stride) as usize])
            .collect())
    }
}

/// Signed distance of `p` to `shape` (object frame).
pub fn sdf_eval(shape: &Shape, p: Vec2) -> SdfSample {
    shape.sdf(p)
}

/// SDF of `shape` placed at `pose`, queried at a sensor-frame point. The
/// gradient is expressed in the sensor frame.
pub fn posed_sdf_eval(shape: &Shape, pose: &PlanarPose, p_world: Vec2) -> SdfSample {
    let local = shape.sdf(pose.inverse_transform_point(p_world));
    SdfSample {
        gradient: pose.rotate(local.gradient),
        ..local
    }
}

pub fn boundary_points(shape: &Shape, m: usize) -> Result<Vec<Vec2>> {
    shape.boundary_points(m)
}

fn box_sdf(p: Vec2, hw: f64, hh: f64) -> SdfSample {
    let qx = p.x.abs() - hw;
    let qy = p.y.abs() - hh;
    if qx > 0.0 || qy > 0.0 {
        let o = Vec2::new(qx.max(0.0), qy.max(0.0));
        let d = o.norm();
        let g = Vec2::new(o.x.copysign(p.x), o.y.copysign(p.y)) * (1.0 / d);
        return SdfSample::regular(d, g);
    }
    let value = qx.max(qy);
    if (qx - qy).abs() <= SINGULAR_EPS {
        return SdfSample::singular(value);
    }
    if qx > qy {
        if p.x == 0.0 {
            return SdfSample::singular(value);
        }
        SdfSample::regular(value, Vec2::new(1f64.copysign(p.x), 0.0))
    } else {
        if p.y == 0.0 {
            return SdfSample::singular(value);
        }
        SdfSample::regular(value, Vec2::new(0.0, 1f64.copysign(p.y)))
    }
}

fn polygon_sdf(p: Vec2, vertices: &[Vec2]) -> SdfSample {
    let n = vertices.len();
    let mut inside = true;
    let mut best = f64::INFINITY;
    let mut second = f64::INFINITY;
    let mut best_closest = Vec2::ZERO;
    let mut best_edge = Vec2::X;
    for i in 0..n {
        let a = vertices[i];
        let e = vertices[(i + 1) % n] - a;
        let w = p - a;
        if e.cross(w) < 0.0 {
            inside = false;
        }
        let t = (w.dot(e) / e.norm_sq()).clamp(0.0, 1.0);
        let closest = a + e * t;
        let d = (p - closest).norm();
        if d < best {
            second = best;
            best = d;
            best_closest = closest;
            best_edge = e;
        } else if d < second {
            second = d;
        }
    }
    let outward = |e: Vec2| Vec2::new(e.y, -e.x) * (1.0 / e.norm());
    if inside {
        if second - best <= SINGULAR_EPS {
            return SdfSample::singular(-best);
        }
        if best == 0.0 {
            return SdfSample::regular(0.0, outward(best_edge));
        }
        SdfSample::regular(-best, (best_closest - p) * (1.0 / best))
    } else {
        SdfSample::regular(best, (p - best_closest) * (1.0 / best))
    }
}

fn polygon_perimeter(vertices: &[Vec2]) -> f64 {
    let n = vertices.len();
    (0..n)
        .map(|i| vertices[(i + 1) % n].distance(vertices[i]))
        .sum()
}

/// Samples a closed vertex loop. Each edge receives a share of the `m` points
/// proportional to its length (largest-remainder rounding) and every edge with
/// a nonzero share starts at its vertex, so corners are always sampled.
fn loop_points(vertices: &[Vec2], m: usize) -> Vec<Vec2> {
    let n = vertices.len();
    let lengths: Vec<f64> = (0..n)
        .map(|i| vertices[(i + 1) % n].distance(vertices[i]))
        .collect();
    let total: f64 = lengths.iter().sum();
    let ideal: Vec<f64> = lengths.iter().map(|l| l / total * m as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut short = m - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }
    let mut out = Vec::with_capacity(m);
    for i in 0..n {
        let a = vertices[i];
        let e = vertices[(i + 1) % n] - a;
        for k in 0..counts[i] {
            out.push(a + e * (k as f64 / counts[i] as f64));
        }
    }
    out
}
