//! Center-distance detection metrics: per-class AP over several distance
//! thresholds, true-positive errors and a composite score.
//!
//! `composite = (5 * mAP + sum_e (1 - min(1, e / bound_e))) / 8` over the
//! three errors ATE (bound 2 m), AOE (bound pi) and AVE (bound 2 m/s).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geometry::normalize_angle;
use crate::heads::Detection;
use crate::synthworld::Box3D;

pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const TP_THRESHOLD: f64 = 2.0;
pub const ATE_BOUND: f64 = 2.0;
pub const AOE_BOUND: f64 = PI;
pub const AVE_BOUND: f64 = 2.0;
/// Recall levels `0.10, 0.11, ..., 1.00` at which precision is averaged.
pub const MIN_RECALL_PERCENT: usize = 10;

/// Predictions and ground truth of one frame, in the same ego frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalFrame {
    pub preds: Vec<Detection>,
    pub gts: Vec<Box3D>,
}

/// One accepted match.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub pred: usize,
    pub gt: usize,
    pub distance: f64,
}

fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Prediction indices by descending score, ties by index.
fn score_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching: in descending score, each prediction takes the nearest
/// still-unmatched ground truth of its class strictly closer than
/// `threshold` (ties by lower index). Returns the matches in that order.
pub fn match_by_center_distance(preds: &[Detection], gts: &[Box3D], threshold: f64) -> Vec<Match> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::new();
    for p in score_order(preds) {
        let pb = &preds[p].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.cls != pb.cls {
                continue;
            }
            let d = center_distance(pb, g);
            if d < threshold && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((gi, d));
            }
        }
        if let Some((gi, d)) = best {
            taken[gi] = true;
            out.push(Match {
                pred: p,
                gt: gi,
                distance: d,
            });
        }
    }
    out
}

fn class_frame(frame: &EvalFrame, cls: usize) -> (Vec<Detection>, Vec<Box3D>) {
    (
        frame.preds.iter().copied().filter(|d| d.bbox.cls == cls).collect(),
        frame.gts.iter().copied().filter(|g| g.cls == cls).collect(),
    )
}

/// Precision/recall points of one class at one threshold, in descending
/// score order over the whole dataset. `None` if the class has no ground
/// truth.
pub fn pr_curve(frames: &[EvalFrame], cls: usize, threshold: f64) -> Option<Vec<(f64, f64)>> {
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut npos = 0;
    for (fi, frame) in frames.iter().enumerate() {
        let (preds, gts) = class_frame(frame, cls);
        npos += gts.len();
        let matched: Vec<usize> = match_by_center_distance(&preds, &gts, threshold)
            .iter()
            .map(|m| m.pred)
            .collect();
        for (pi, p) in preds.iter().enumerate() {
            scored.push((p.score, fi, pi, matched.contains(&pi)));
        }
    }
    if npos == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(scored.len());
    for (i, s) in scored.iter().enumerate() {
        tp += usize::from(s.3);
        curve.push((tp as f64 / npos as f64, tp as f64 / (i + 1) as f64));
    }
    Some(curve)
}

/// Mean interpolated precision over recall levels 0.10..=1.00 in steps of
/// 0.01, where the precision at level `r` is the best precision at any
/// recall `>= r` (zero if `r` is never reached).
pub fn ap_from_curve(curve: &[(f64, f64)]) -> f64 {
    let levels = MIN_RECALL_PERCENT..=100;
    let n = levels.clone().count();
    let sum: f64 = levels
        .map(|i| {
            let r = i as f64 / 100.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    sum / n as f64
}

pub fn compute_ap(frames: &[EvalFrame], cls: usize, threshold: f64) -> Option<f64> {
    pr_curve(frames, cls, threshold).map(|c| ap_from_curve(&c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: usize,
    pub gts: usize,
    /// AP at each of the distance thresholds.
    pub ap_by_threshold: Vec<f64>,
    pub ap: f64,
    pub ate: Option<f64>,
    pub aoe: Option<f64>,
    pub ave: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "ATE")]
    pub ate: f64,
    #[serde(rename = "AOE")]
    pub aoe: f64,
    #[serde(rename = "AVE")]
    pub ave: f64,
    pub composite: f64,
    pub per_class: Vec<ClassResult>,
    pub thresholds: Vec<f64>,
    pub frames: usize,
}

/// Mean AP over classes that have ground truth, each averaged over the
/// distance thresholds. Zero when no class has ground truth.
pub fn compute_map(frames: &[EvalFrame], classes: usize) -> f64 {
    let aps: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let per: Option<Vec<f64>> = DISTANCE_THRESHOLDS.iter().map(|&t| compute_ap(frames, c, t)).collect();
            per.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Absolute yaw difference on the full circle, in `[0, pi]`.
pub fn yaw_error(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

/// Mean (ATE, AOE, AVE) over matched pairs of one class at the 2 m
/// threshold; `None` without matches.
fn class_tp_errors(frames: &[EvalFrame], cls: usize) -> Option<(f64, f64, f64)> {
    let mut sums = (0.0, 0.0, 0.0);
    let mut n = 0usize;
    for frame in frames {
        let (preds, gts) = class_frame(frame, cls);
        for m in match_by_center_distance(&preds, &gts, TP_THRESHOLD) {
            let (p, g) = (&preds[m.pred].bbox, &gts[m.gt]);
            sums.0 += m.distance;
            sums.1 += yaw_error(p.yaw, g.yaw);
            sums.2 += (p.vx - g.vx).hypot(p.vy - g.vy);
            n += 1;
        }
    }
    (n > 0).then(|| (sums.0 / n as f64, sums.1 / n as f64, sums.2 / n as f64))
}

/// Class-averaged true-positive errors. Classes with ground truth but no
/// match count at the bounds; with no ground truth at all every error sits
/// at its bound.
pub fn compute_tp_errors(frames: &[EvalFrame], classes: usize) -> (f64, f64, f64) {
    let mut acc = (0.0, 0.0, 0.0);
    let mut n = 0usize;
    for c in 0..classes {
        if !frames.iter().any(|f| f.gts.iter().any(|g| g.cls == c)) {
            continue;
        }
        let e = class_tp_errors(frames, c).unwrap_or((ATE_BOUND, AOE_BOUND, AVE_BOUND));
        acc.0 += e.0;
        acc.1 += e.1;
        acc.2 += e.2;
        n += 1;
    }
    if n == 0 {
        return (ATE_BOUND, AOE_BOUND, AVE_BOUND);
    }
    (acc.0 / n as f64, acc.1 / n as f64, acc.2 / n as f64)
}

pub fn compute_composite(map: f64, errors: (f64, f64, f64), bounds: (f64, f64, f64)) -> f64 {
    let term = |e: f64, b: f64| 1.0 - (e / b).min(1.0);
    (5.0 * map + term(errors.0, bounds.0) + term(errors.1, bounds.1) + term(errors.2, bounds.2)) / 8.0
}

pub fn evaluate(frames: &[EvalFrame], classes: usize) -> EvalResult {
    let per_class: Vec<ClassResult> = (0..classes)
        .map(|c| {
            let gts = frames.iter().map(|f| f.gts.iter().filter(|g| g.cls == c).count()).sum();
            let ap_by_threshold: Vec<f64> = DISTANCE_THRESHOLDS
                .iter()
                .map(|&t| compute_ap(frames, c, t).unwrap_or(0.0))
                .collect();
            let ap = ap_by_threshold.iter().sum::<f64>() / ap_by_threshold.len() as f64;
            let tp = class_tp_errors(frames, c);
            ClassResult {
                class: c,
                gts,
                ap_by_threshold,
                ap,
                ate: tp.map(|e| e.0),
                aoe: tp.map(|e| e.1),
                ave: tp.map(|e| e.2),
            }
        })
        .collect();
    let map = compute_map(frames, classes);
    let (ate, aoe, ave) = compute_tp_errors(frames, classes);
    EvalResult {
        map,
        ate,
        aoe,
        ave,
        composite: compute_composite(map, (ate, aoe, ave), (ATE_BOUND, AOE_BOUND, AVE_BOUND)),
        per_class,
        thresholds: DISTANCE_THRESHOLDS.to_vec(),
        frames: frames.len(),
    }
}
