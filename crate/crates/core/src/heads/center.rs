//! Center-based head: per-class center heatmaps plus dense box regression.

use hopbev_autodiff::{Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::{Detection, LossTerms};
use crate::error::{Error, Result};
use crate::geometry::BevGridSpec;
use crate::nn::{flatten_hw, Conv, Init};
use crate::synthworld::Box3D;

pub const REG_CHANNELS: usize = 8;
pub const VEL_CHANNELS: usize = 2;
pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const REG_WEIGHT: f64 = 0.25;
pub const VEL_WEIGHT: f64 = 0.25;
/// Heatmap bias at init, `-ln((1 - 0.1) / 0.1)`, so initial scores are 0.1.
pub const HEATMAP_BIAS: f64 = -2.19;

/// Raw head maps: heatmap logits `[H, W, classes]`, regression
/// `[H, W, 8]` (dx, dy in cells, z, log w, log l, log h, sin yaw, cos yaw)
/// and velocity `[H, W, 2]`.
#[derive(Clone, Copy, Debug)]
pub struct CenterHeadOutput {
    pub heatmap_logits: Var,
    pub reg: Var,
    pub vel: Var,
}

#[derive(Clone, Debug)]
pub struct CenterHead {
    pub classes: usize,
    pub trunk: Conv,
    pub heatmap: Conv,
    pub reg: Conv,
    pub vel: Conv,
}

impl CenterHead {
    pub fn new(prefix: &str, c: usize, classes: usize) -> Self {
        Self {
            classes,
            trunk: Conv::new(&format!("{prefix}.trunk"), 3, c, c),
            heatmap: Conv::new(&format!("{prefix}.heatmap"), 1, c, classes),
            reg: Conv::new(&format!("{prefix}.reg"), 1, c, REG_CHANNELS),
            vel: Conv::new(&format!("{prefix}.vel"), 1, c, VEL_CHANNELS),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.trunk.init(store, rng, Init::Xavier);
        self.heatmap.init(store, rng, Init::Xavier);
        store.set(&self.heatmap.b, Tensor::full(&[self.classes], HEATMAP_BIAS));
        self.reg.init(store, rng, Init::Xavier);
        self.vel.init(store, rng, Init::Xavier);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, bev: Var) -> Result<CenterHeadOutput> {
        let s = g.shape(bev);
        if s.len() != 3 || s[2] != self.trunk.cin {
            return Err(Error::Shape(format!("head input {s:?}, expected [H, W, {}]", self.trunk.cin)));
        }
        let h = self.trunk.forward(g, store, bev);
        let h = g.relu(h);
        Ok(CenterHeadOutput {
            heatmap_logits: self.heatmap.forward(g, store, h),
            reg: self.reg.forward(g, store, h),
            vel: self.vel.forward(g, store, h),
        })
    }
}

/// Regression target at one peak cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PeakTarget {
    /// Row-major cell index `i * W + j`.
    pub cell: usize,
    pub cls: usize,
    pub reg: [f64; REG_CHANNELS],
    pub vel: [f64; VEL_CHANNELS],
}

/// Heatmap `[H, W, classes]` plus one regression target per kept box. The
/// peak list doubles as the valid mask: boxes outside the grid are absent,
/// and a second box on an already-claimed peak cell is dropped.
#[derive(Clone, Debug)]
pub struct CenterTargets {
    pub heatmap: Tensor,
    pub peaks: Vec<PeakTarget>,
}

/// Gaussian radius in cells for a box footprint.
pub fn gaussian_radius(w: f64, l: f64, cell_size: f64) -> usize {
    ((w.min(l) / (2.0 * cell_size)).ceil() as usize).max(2)
}

pub fn gaussian_sigma(radius: usize) -> f64 {
    (2 * radius + 1) as f64 / 6.0
}

pub fn encode_center_targets(gt: &[Box3D], grid: &BevGridSpec, classes: usize) -> Result<CenterTargets> {
    let (h, w) = (grid.h(), grid.w());
    let mut heatmap = Tensor::zeros(&[h, w, classes]);
    let mut peaks: Vec<PeakTarget> = Vec::new();
    for b in gt {
        if b.cls >= classes {
            return Err(Error::Index(format!("class {} outside 0..{classes}", b.cls)));
        }
        let Some((ci, cj)) = grid.cell_of(b.x, b.y) else {
            continue;
        };
        let r = gaussian_radius(b.w, b.l, grid.cell_size);
        let sigma = gaussian_sigma(r);
        let hm = heatmap.data_mut();
        let (lo_i, hi_i) = (ci.saturating_sub(r), (ci + r).min(h - 1));
        let (lo_j, hi_j) = (cj.saturating_sub(r), (cj + r).min(w - 1));
        for i in lo_i..=hi_i {
            for j in lo_j..=hi_j {
                let d2 = (i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let idx = (i * w + j) * classes + b.cls;
                hm[idx] = hm[idx].max(v);
            }
        }
        let cell = ci * w + cj;
        if peaks.iter().any(|p| p.cell == cell) {
            continue;
        }
        let (u, v) = grid.to_grid(b.x, b.y);
        peaks.push(PeakTarget {
            cell,
            cls: b.cls,
            reg: [
                u - ci as f64,
                v - cj as f64,
                b.z,
                b.w.ln(),
                b.l.ln(),
                b.h.ln(),
                b.yaw.sin(),
                b.yaw.cos(),
            ],
            vel: [b.vx, b.vy],
        });
    }
    Ok(CenterTargets { heatmap, peaks })
}

/// Focal heatmap loss normalized by the object count, plus weighted L1 on
/// regression and velocity at peak cells.
pub fn detection_loss_center(g: &mut Graph, pred: &CenterHeadOutput, targets: &CenterTargets) -> Result<LossTerms> {
    if g.shape(pred.heatmap_logits) != targets.heatmap.shape() {
        return Err(Error::Shape(format!(
            "heatmap {:?} vs target {:?}",
            g.shape(pred.heatmap_logits),
            targets.heatmap.shape()
        )));
    }
    let norm = 1.0 / targets.peaks.len().max(1) as f64;
    let focal = g.sigmoid_focal_loss(pred.heatmap_logits, &targets.heatmap, FOCAL_ALPHA, FOCAL_BETA);
    let heatmap = g.scale(focal, norm);
    if targets.peaks.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(LossTerms {
            total: heatmap,
            heatmap,
            regression: zero,
            velocity: zero,
            classification: zero,
        });
    }
    let cells: Vec<usize> = targets.peaks.iter().map(|p| p.cell).collect();
    let l1_at = |g: &mut Graph, map: Var, tgt: Vec<f64>, width: usize| {
        let flat = flatten_hw(g, map);
        let picked = g.select_rows(flat, &cells);
        let t = g.constant(Tensor::new(&[cells.len(), width], tgt).expect("target shape"));
        let d = g.sub(picked, t);
        let a = g.abs(d);
        g.sum(a)
    };
    let reg_t: Vec<f64> = targets.peaks.iter().flat_map(|p| p.reg).collect();
    let vel_t: Vec<f64> = targets.peaks.iter().flat_map(|p| p.vel).collect();
    let reg = l1_at(g, pred.reg, reg_t, REG_CHANNELS);
    let reg = g.scale(reg, REG_WEIGHT * norm);
    let vel = l1_at(g, pred.vel, vel_t, VEL_CHANNELS);
    let vel = g.scale(vel, VEL_WEIGHT * norm);
    let zero = g.constant(Tensor::scalar(0.0));
    Ok(LossTerms {
        total: g.add_n(&[heatmap, reg, vel]),
        heatmap,
        regression: reg,
        velocity: vel,
        classification: zero,
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Top-`max_det` 3x3 local maxima of the sigmoid heatmap scoring at least
/// `score_thresh`, converted to boxes. Ties in score keep the lower
/// (cell, class) index first.
pub fn decode_detections(
    heatmap_logits: &Tensor,
    reg: &Tensor,
    vel: &Tensor,
    grid: &BevGridSpec,
    max_det: usize,
    score_thresh: f64,
) -> Vec<Detection> {
    let s = heatmap_logits.shape();
    let (h, w, classes) = (s[0], s[1], s[2]);
    let hm: Vec<f64> = heatmap_logits.data().iter().map(|&x| sigmoid(x)).collect();
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for c in 0..classes {
                let v = hm[(i * w + j) * classes + c];
                if v < score_thresh {
                    continue;
                }
                let mut is_max = true;
                'nb: for ni in i.saturating_sub(1)..=(i + 1).min(h - 1) {
                    for nj in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                        if hm[(ni * w + nj) * classes + c] > v {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    cand.push((v, i * w + j, c));
                }
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cand.truncate(max_det);
    cand.into_iter()
        .map(|(score, cell, cls)| {
            let r = &reg.data()[cell * REG_CHANNELS..(cell + 1) * REG_CHANNELS];
            let ve = &vel.data()[cell * VEL_CHANNELS..(cell + 1) * VEL_CHANNELS];
            let (x, y) = grid.to_metric((cell / w) as f64 + r[0], (cell % w) as f64 + r[1]);
            Detection {
                bbox: Box3D {
                    x,
                    y,
                    z: r[2],
                    w: r[3].exp(),
                    l: r[4].exp(),
                    h: r[5].exp(),
                    yaw: r[6].atan2(r[7]),
                    vx: ve[0],
                    vy: ve[1],
                    cls,
                    track_id: 0,
                },
                score,
            }
        })
        .collect()
}
