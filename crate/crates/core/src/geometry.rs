//! Point clouds, oriented boxes and the box-aligned canonical frame.

use std::f64::consts::PI;

use crate::error::{invalid, Result};

pub type Point = [f64; 3];

/// Ordered 3-D points with `dim` feature channels per point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<Point>,
    /// Row-major `len() × dim`.
    pub features: Vec<f64>,
    pub dim: usize,
}

impl PointCloud {
    pub fn new(positions: Vec<Point>, features: Vec<f64>, dim: usize) -> Result<Self> {
        if features.len() != positions.len() * dim {
            return invalid(format!(
                "{} feature values for {} points with {dim} channels",
                features.len(),
                positions.len()
            ));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("non-finite point position");
        }
        Ok(Self { positions, features, dim })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            positions: Vec::new(),
            features: Vec::new(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, p: Point, feature: &[f64]) {
        debug_assert_eq!(feature.len(), self.dim);
        self.positions.push(p);
        self.features.extend_from_slice(feature);
    }

    /// Points at the given indices, in index order (duplicates allowed).
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut out = Self::empty(self.dim);
        for &i in idx {
            out.push(self.positions[i], self.feature(i));
        }
        out
    }

    /// Appends all points of `other` (same feature width).
    pub fn extend(&mut self, other: &PointCloud) -> Result<()> {
        if other.dim != self.dim {
            return invalid(format!("feature width {} vs {}", self.dim, other.dim));
        }
        self.positions.extend_from_slice(&other.positions);
        self.features.extend_from_slice(&other.features);
        Ok(())
    }

    pub fn map_positions(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            positions: self.positions.iter().map(|&p| f(p)).collect(),
            features: self.features.clone(),
            dim: self.dim,
        }
    }
}

/// Wraps an angle into (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Oriented box: center, extents (`l` along the heading, `w` across it,
/// `h` vertical) and heading `theta` about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3D {
    pub fn new(center: Point, w: f64, l: f64, h: f64, theta: f64) -> Result<Self> {
        let b = Self {
            x: center[0],
            y: center[1],
            z: center[2],
            w,
            l,
            h,
            theta: normalize_angle(theta),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0) {
            return invalid(format!("degenerate box extents ({}, {}, {})", self.w, self.l, self.h));
        }
        if ![self.x, self.y, self.z, self.theta].iter().all(|v| v.is_finite()) {
            return invalid("non-finite box pose");
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        [self.x, self.y, self.z]
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    pub fn with_center(&self, c: Point) -> Self {
        Self {
            x: c[0],
            y: c[1],
            z: c[2],
            ..*self
        }
    }

    pub fn frame(&self) -> Frame {
        Frame {
            origin: self.center(),
            theta: self.theta,
        }
    }

    /// BEV corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(u, v)| [self.x + c * u - s * v, self.y + s * u + c * v])
    }

    /// Whether `p` lies inside the box grown by `margin_xy` on each
    /// horizontal side and `margin_z` on each vertical side.
    pub fn contains(&self, p: Point, margin_xy: f64, margin_z: f64) -> bool {
        let q = self.frame().to_local(p);
        q[0].abs() <= self.l / 2.0 + margin_xy && q[1].abs() <= self.w / 2.0 + margin_xy && q[2].abs() <= self.h / 2.0 + margin_z
    }
}

/// Rigid frame: translation to `origin` plus rotation by `theta` about the
/// vertical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub origin: Point,
    pub theta: f64,
}

impl Frame {
    /// World → frame: translate by −origin, rotate by −theta.
    pub fn to_local(&self, p: Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.origin[0], p[1] - self.origin[1]);
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.origin[2]]
    }

    pub fn to_world(&self, q: Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        [
            c * q[0] - s * q[1] + self.origin[0],
            s * q[0] + c * q[1] + self.origin[1],
            q[2] + self.origin[2],
        ]
    }

    pub fn box_to_local(&self, b: &Box3D) -> Box3D {
        let c = self.to_local(b.center());
        Box3D {
            x: c[0],
            y: c[1],
            z: c[2],
            theta: normalize_angle(b.theta - self.theta),
            ..*b
        }
    }

    pub fn box_to_world(&self, b: &Box3D) -> Box3D {
        let c = self.to_world(b.center());
        Box3D {
            x: c[0],
            y: c[1],
            z: c[2],
            theta: normalize_angle(b.theta + self.theta),
            ..*b
        }
    }
}

pub fn distance(a: Point, b: Point) -> f64 {
    dist2(a, b).sqrt()
}

pub fn dist2(a: Point, b: Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}
