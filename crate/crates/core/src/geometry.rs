//! Planar rigid transforms between ego frames and the BEV grid mapping.
//!
//! Ego frames follow the usual vehicle convention: `x` forward, `y` left,
//! yaw counter-clockwise from `+x`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{Box3D, EgoPose};

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Rigid SE(2) map `p -> R p + t`, mapping coordinates expressed in a source
/// frame to coordinates expressed in a target frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform2D {
    cos: f64,
    sin: f64,
    tx: f64,
    ty: f64,
}

impl Transform2D {
    pub const IDENTITY: Self = Self {
        cos: 1.0,
        sin: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(angle: f64, tx: f64, ty: f64) -> Self {
        Self {
            cos: angle.cos(),
            sin: angle.sin(),
            tx,
            ty,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { tx, ty, ..Self::IDENTITY }
    }

    pub fn rotation(angle: f64) -> Self {
        Self::new(angle, 0.0, 0.0)
    }

    /// Builds from a row-major 2x2 rotation matrix, rejecting matrices that
    /// are not orthonormal with determinant +1 (to 1e-9).
    pub fn from_matrix(r: [[f64; 2]; 2], t: [f64; 2]) -> Result<Self> {
        let tol = 1e-9;
        let det = r[0][0] * r[1][1] - r[0][1] * r[1][0];
        let col0 = r[0][0] * r[0][0] + r[1][0] * r[1][0];
        let col1 = r[0][1] * r[0][1] + r[1][1] * r[1][1];
        let dot = r[0][0] * r[0][1] + r[1][0] * r[1][1];
        if (det - 1.0).abs() > tol || (col0 - 1.0).abs() > tol || (col1 - 1.0).abs() > tol || dot.abs() > tol {
            return Err(Error::Invariant(format!("not a proper rotation: {r:?}")));
        }
        Ok(Self {
            cos: r[0][0],
            sin: r[1][0],
            tx: t[0],
            ty: t[1],
        })
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        [[self.cos, -self.sin], [self.sin, self.cos]]
    }

    pub fn angle(&self) -> f64 {
        self.sin.atan2(self.cos)
    }

    pub fn translation_xy(&self) -> (f64, f64) {
        (self.tx, self.ty)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.cos * x - self.sin * y + self.tx, self.sin * x + self.cos * y + self.ty)
    }

    /// Rotates a free vector (no translation).
    pub fn rotate(&self, x: f64, y: f64) -> (f64, f64) {
        (self.cos * x - self.sin * y, self.sin * x + self.cos * y)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Transform2D) -> Transform2D {
        let (tx, ty) = self.apply(other.tx, other.ty);
        Transform2D {
            cos: self.cos * other.cos - self.sin * other.sin,
            sin: self.sin * other.cos + self.cos * other.sin,
            tx,
            ty,
        }
    }

    pub fn inverse(&self) -> Transform2D {
        // R^T (p - t)
        let tx = -(self.cos * self.tx + self.sin * self.ty);
        let ty = -(-self.sin * self.tx + self.cos * self.ty);
        Transform2D {
            cos: self.cos,
            sin: -self.sin,
            tx,
            ty,
        }
    }

    /// Largest entry-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &Transform2D) -> f64 {
        [
            self.cos - other.cos,
            self.sin - other.sin,
            self.tx - other.tx,
            self.ty - other.ty,
        ]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()))
    }
}

pub fn compose(a: &Transform2D, b: &Transform2D) -> Transform2D {
    a.compose(b)
}

pub fn invert(a: &Transform2D) -> Transform2D {
    a.inverse()
}

/// Ego-to-world transform of a pose.
pub fn pose_to_world(pose: &EgoPose) -> Transform2D {
    Transform2D::new(pose.heading, pose.px, pose.py)
}

/// Transform taking coordinates in `source`'s ego frame to `target`'s ego frame.
pub fn pose_relative(target: &EgoPose, source: &EgoPose) -> Transform2D {
    pose_to_world(target).inverse().compose(&pose_to_world(source))
}

/// Re-expresses boxes through `t`: centers are mapped as points, velocities
/// rotated as vectors, yaw shifted by the rotation angle. Height, size,
/// class and track id are unchanged.
pub fn transform_boxes(boxes: &[Box3D], t: &Transform2D) -> Vec<Box3D> {
    let dyaw = t.angle();
    boxes
        .iter()
        .map(|b| {
            let (x, y) = t.apply(b.x, b.y);
            let (vx, vy) = t.rotate(b.vx, b.vy);
            Box3D {
                x,
                y,
                vx,
                vy,
                yaw: normalize_angle(b.yaw + dyaw),
                ..*b
            }
        })
        .collect()
}

/// Square BEV grid centred on the ego origin.
///
/// Row index `i` runs along ego `x`, column `j` along ego `y`. Cell `(i, j)`
/// is centred at `((i - H/2) * cell_size, (j - W/2) * cell_size)`, so the ego
/// origin sits exactly on cell `(H/2, W/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevGridSpec {
    /// Cells per side (H = W).
    pub cells: usize,
    /// Meters per cell.
    pub cell_size: f64,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self {
            cells: 64,
            cell_size: 0.8,
        }
    }
}

impl BevGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cells < 2 || !(self.cell_size > 0.0) {
            return Err(Error::Config(format!(
                "grid needs >= 2 cells and positive cell size, got {} x {}",
                self.cells, self.cell_size
            )));
        }
        Ok(())
    }

    pub fn h(&self) -> usize {
        self.cells
    }

    pub fn w(&self) -> usize {
        self.cells
    }

    /// Side length in meters.
    pub fn extent(&self) -> f64 {
        self.cells as f64 * self.cell_size
    }

    /// Continuous grid coordinates `(u, v)` of a metric point.
    pub fn to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        let half = (self.cells / 2) as f64;
        (x / self.cell_size + half, y / self.cell_size + half)
    }

    /// Metric point at continuous grid coordinates `(u, v)`.
    pub fn to_metric(&self, u: f64, v: f64) -> (f64, f64) {
        let half = (self.cells / 2) as f64;
        ((u - half) * self.cell_size, (v - half) * self.cell_size)
    }

    /// Whether a metric point falls inside the grid footprint.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.to_grid(x, y);
        let hi = self.cells as f64 - 0.5;
        (-0.5..hi).contains(&u) && (-0.5..hi).contains(&v)
    }

    /// Cell containing a metric point, if inside.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.contains(x, y) {
            return None;
        }
        let (u, v) = self.to_grid(x, y);
        let i = (u.round() as usize).min(self.cells - 1);
        let j = (v.round() as usize).min(self.cells - 1);
        Some((i, j))
    }
}
