//! Drawing box sets into observation grids.

use hopbev_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix_seed, Box3D, EgoPose, SceneSequence};
use crate::error::{Error, Result};
use crate::geometry::{pose_relative, transform_boxes, BevGridSpec};

/// Occlusion model: each occupied cell is zeroed with probability `dropout`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub dropout: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { dropout: 0.1, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { dropout: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1]", self.dropout)));
        }
        Ok(())
    }
}

/// A rasterized frame, `[H, W, obs_channels(classes)]`, drawn in the ego
/// frame of `reference_pose`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationGrid {
    pub values: Tensor,
    pub frame_index: usize,
    pub reference_pose: EgoPose,
}

/// Channel layout: occupancy, one channel per class, then z, w, l, sin yaw,
/// cos yaw.
pub fn obs_channels(classes: usize) -> usize {
    1 + classes + 5
}

const CLASS_SIGMA: f64 = 1.0;
const CLASS_RADIUS: i64 = 2;

/// Draws `boxes` (already in the grid's ego frame) into a fresh grid.
///
/// Occupancy and the attribute channels are bilinearly splatted at each box
/// center, attributes weighted by the splat weight. Class channels hold a
/// Gaussian bump (sigma one cell) around the center, max-combined across
/// boxes. Dropout draws one uniform per cell in row-major order from a
/// generator seeded with `dropout_seed` and zeroes every channel of occupied
/// cells whose draw falls below the dropout rate.
pub fn rasterize_boxes(
    boxes: &[Box3D],
    grid: &BevGridSpec,
    classes: usize,
    noise: &NoiseConfig,
    dropout_seed: u64,
) -> Result<Tensor> {
    grid.validate()?;
    noise.validate()?;
    let (h, w) = (grid.h(), grid.w());
    let c = obs_channels(classes);
    let mut out = Tensor::zeros(&[h, w, c]);
    let data = out.data_mut();
    for b in boxes {
        if b.cls >= classes {
            return Err(Error::Index(format!("class {} outside 0..{classes}", b.cls)));
        }
        let (u, v) = grid.to_grid(b.x, b.y);
        let attrs = [b.z / 3.0, b.w / 5.0, b.l / 5.0, b.yaw.sin(), b.yaw.cos()];
        let (i0, j0) = (u.floor(), v.floor());
        let (fu, fv) = (u - i0, v - j0);
        for (di, wi) in [(0i64, 1.0 - fu), (1, fu)] {
            for (dj, wj) in [(0i64, 1.0 - fv), (1, fv)] {
                let (i, j) = (i0 as i64 + di, j0 as i64 + dj);
                let wt = wi * wj;
                if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 || wt == 0.0 {
                    continue;
                }
                let base = (i as usize * w + j as usize) * c;
                data[base] += wt;
                for (a, &val) in attrs.iter().enumerate() {
                    data[base + 1 + classes + a] += wt * val;
                }
            }
        }
        let (ci, cj) = (u.round() as i64, v.round() as i64);
        for i in ci - CLASS_RADIUS..=ci + CLASS_RADIUS {
            for j in cj - CLASS_RADIUS..=cj + CLASS_RADIUS {
                if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 {
                    continue;
                }
                let d2 = (i as f64 - u).powi(2) + (j as f64 - v).powi(2);
                let g = (-d2 / (2.0 * CLASS_SIGMA * CLASS_SIGMA)).exp();
                let idx = (i as usize * w + j as usize) * c + 1 + b.cls;
                data[idx] = data[idx].max(g);
            }
        }
    }
    if noise.dropout > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        for cell in data.chunks_mut(c) {
            let draw: f64 = rng.random();
            if cell[0] > 0.0 && draw < noise.dropout {
                cell.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
    Ok(out)
}

/// Draws frame `source`'s boxes in frame `reference`'s ego coordinates.
/// Dropout depends on the sequence seed, the source frame and the noise seed
/// only.
pub fn rasterize_in_frame(
    seq: &SceneSequence,
    source: usize,
    reference: usize,
    grid: &BevGridSpec,
    classes: usize,
    noise: &NoiseConfig,
) -> Result<ObservationGrid> {
    seq.check_frame(source)?;
    seq.check_frame(reference)?;
    let t = pose_relative(&seq.poses[reference], &seq.poses[source]);
    let boxes = transform_boxes(&seq.gt[source], &t);
    let seed = mix_seed(&[seq.seed, source as u64, noise.seed]);
    Ok(ObservationGrid {
        values: rasterize_boxes(&boxes, grid, classes, noise, seed)?,
        frame_index: seq.poses[source].frame_index,
        reference_pose: seq.poses[reference],
    })
}
