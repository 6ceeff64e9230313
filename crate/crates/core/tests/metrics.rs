mod common;

use std::f64::consts::PI;

use common::rng;
use hopbev::geometry::normalize_angle;
use hopbev::heads::Detection;
use hopbev::metrics::{
    ap_from_curve, compute_composite, compute_map, compute_tp_errors, evaluate, match_by_center_distance, pr_curve,
    EvalFrame, ATE_BOUND, AOE_BOUND, AVE_BOUND, DISTANCE_THRESHOLDS, TP_THRESHOLD,
};
use hopbev::synthworld::Box3D;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const BOUNDS: (f64, f64, f64) = (ATE_BOUND, AOE_BOUND, AVE_BOUND);

fn bx(x: f64, y: f64, cls: usize) -> Box3D {
    Box3D {
        x,
        y,
        z: 0.8,
        w: 1.9,
        l: 4.5,
        h: 1.6,
        yaw: 0.0,
        vx: 0.0,
        vy: 0.0,
        cls,
        track_id: 0,
    }
}

fn det(b: Box3D, score: f64) -> Detection {
    Detection { bbox: b, score }
}

fn random_frame(r: &mut ChaCha8Rng, npred: usize, ngt: usize, classes: usize) -> EvalFrame {
    let g = |r: &mut ChaCha8Rng| {
        let mut b = bx(r.random_range(-8.0..8.0), r.random_range(-8.0..8.0), r.random_range(0..classes));
        b.yaw = r.random_range(-PI..PI);
        b.vx = r.random_range(-3.0..3.0);
        b.vy = r.random_range(-3.0..3.0);
        b
    };
    let gts: Vec<Box3D> = (0..ngt).map(|_| g(r)).collect();
    let preds = (0..npred)
        .map(|_| {
            let mut b = g(r);
            if !gts.is_empty() && r.random_bool(0.6) {
                let t = gts[r.random_range(0..gts.len())];
                b.x = t.x + r.random_range(-1.5..1.5);
                b.y = t.y + r.random_range(-1.5..1.5);
                b.cls = t.cls;
            }
            // Coarse scores so ties occur.
            det(b, r.random_range(1..6) as f64 / 5.0)
        })
        .collect();
    EvalFrame { preds, gts }
}

/// Greedy matching replayed from an explicit candidate list: every
/// (pred, gt) pair sorted by (pred rank, distance, gt index), accepted when
/// both ends are still free.
fn greedy_oracle(preds: &[Detection], gts: &[Box3D], thr: f64) -> Vec<(usize, usize)> {
    let mut rank: Vec<usize> = (0..preds.len()).collect();
    rank.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    let mut cands = Vec::new();
    for (ri, &p) in rank.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            let d = ((preds[p].bbox.x - g.x).powi(2) + (preds[p].bbox.y - g.y).powi(2)).sqrt();
            if g.cls == preds[p].bbox.cls && d < thr {
                cands.push((ri, d, gi, p));
            }
        }
    }
    cands.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.partial_cmp(&b.1).unwrap()).then(a.2.cmp(&b.2)));
    let (mut pu, mut gu) = (vec![false; preds.len()], vec![false; gts.len()]);
    let mut out = Vec::new();
    for (_, _, gi, p) in cands {
        if !pu[p] && !gu[gi] {
            pu[p] = true;
            gu[gi] = true;
            out.push((p, gi));
        }
    }
    out
}

#[test]
fn greedy_matching_matches_replay_oracle() {
    let mut r = rng(1);
    for _ in 0..300 {
        let f = random_frame(&mut r, 8, 6, 2);
        for thr in DISTANCE_THRESHOLDS {
            let got: Vec<(usize, usize)> = match_by_center_distance(&f.preds, &f.gts, thr)
                .iter()
                .map(|m| (m.pred, m.gt))
                .collect();
            assert_eq!(got, greedy_oracle(&f.preds, &f.gts, thr));
        }
    }
}

#[test]
fn hand_computed_precision_recall() {
    let gts = vec![bx(0.0, 0.0, 0), bx(10.0, 0.0, 0)];
    let preds = vec![
        det(bx(0.1, 0.0, 0), 0.9),
        det(bx(-10.0, 0.0, 0), 0.8),
        det(bx(10.0, 0.2, 0), 0.7),
    ];
    let frames = [EvalFrame { preds, gts }];
    let curve = pr_curve(&frames, 0, 1.0).unwrap();
    let want = [(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)];
    for (a, b) in curve.iter().zip(&want) {
        assert!((a.0 - b.0).abs() < 1e-15 && (a.1 - b.1).abs() < 1e-15);
    }
    // Levels 0.10..=0.50 see precision 1, levels 0.51..=1.00 see 2/3.
    let ap = ap_from_curve(&curve);
    assert!((ap - (41.0 + 50.0 * 2.0 / 3.0) / 91.0).abs() < 1e-12);
    assert!(pr_curve(&frames, 1, 1.0).is_none());
}

#[test]
fn tp_errors_match_loop_oracle() {
    let mut r = rng(2);
    let frames: Vec<EvalFrame> = (0..6).map(|_| random_frame(&mut r, 7, 5, 3)).collect();
    let mut per_class = Vec::new();
    for c in 0..3 {
        if !frames.iter().any(|f| f.gts.iter().any(|g| g.cls == c)) {
            continue;
        }
        let mut acc = Vec::new();
        for f in &frames {
            let preds: Vec<Detection> = f.preds.iter().copied().filter(|d| d.bbox.cls == c).collect();
            let gts: Vec<Box3D> = f.gts.iter().copied().filter(|g| g.cls == c).collect();
            for (p, gi) in greedy_oracle(&preds, &gts, TP_THRESHOLD) {
                let (a, b) = (preds[p].bbox, gts[gi]);
                let dyaw = normalize_angle(a.yaw - b.yaw).abs();
                acc.push((((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt(), dyaw, ((a.vx - b.vx).powi(2) + (a.vy - b.vy).powi(2)).sqrt()));
            }
        }
        per_class.push(if acc.is_empty() {
            BOUNDS
        } else {
            let n = acc.len() as f64;
            (
                acc.iter().map(|e| e.0).sum::<f64>() / n,
                acc.iter().map(|e| e.1).sum::<f64>() / n,
                acc.iter().map(|e| e.2).sum::<f64>() / n,
            )
        });
    }
    let n = per_class.len() as f64;
    let want = (
        per_class.iter().map(|e| e.0).sum::<f64>() / n,
        per_class.iter().map(|e| e.1).sum::<f64>() / n,
        per_class.iter().map(|e| e.2).sum::<f64>() / n,
    );
    let got = compute_tp_errors(&frames, 3);
    assert!((got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12 && (got.2 - want.2).abs() < 1e-12);
}

#[test]
fn composite_examples() {
    assert_eq!(compute_composite(1.0, (0.0, 0.0, 0.0), BOUNDS), 1.0);
    assert_eq!(compute_composite(0.0, BOUNDS, BOUNDS), 0.0);
    assert!((compute_composite(0.5, (1.0, PI / 2.0, 1.0), BOUNDS) - 0.5).abs() < 1e-15);
    assert!((compute_composite(0.5, (1.0, PI / 2.0, 5.0), BOUNDS) - 0.4375).abs() < 1e-15);
}

#[test]
fn perfect_and_silent_detectors() {
    let mut r = rng(3);
    let frames: Vec<EvalFrame> = (0..4)
        .map(|_| {
            let f = random_frame(&mut r, 0, 5, 3);
            EvalFrame {
                preds: f.gts.iter().map(|&b| det(b, 0.8)).collect(),
                gts: f.gts,
            }
        })
        .collect();
    let res = evaluate(&frames, 3);
    assert_eq!(res.map, 1.0);
    assert_eq!((res.ate, res.aoe, res.ave), (0.0, 0.0, 0.0));
    assert_eq!(res.composite, 1.0);

    let silent: Vec<EvalFrame> = frames
        .iter()
        .map(|f| EvalFrame {
            preds: Vec::new(),
            gts: f.gts.clone(),
        })
        .collect();
    let res = evaluate(&silent, 3);
    assert_eq!(res.map, 0.0);
    assert_eq!(res.composite, 0.0);
}

proptest! {
    #[test]
    fn removing_false_positives_never_lowers_map(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let frames: Vec<EvalFrame> = (0..3).map(|_| random_frame(&mut r, 8, 4, 2)).collect();
        let far = |d: &Detection, gts: &[Box3D]| {
            gts.iter()
                .filter(|g| g.cls == d.bbox.cls)
                .all(|g| (d.bbox.x - g.x).hypot(d.bbox.y - g.y) >= DISTANCE_THRESHOLDS[3])
        };
        let pruned: Vec<EvalFrame> = frames
            .iter()
            .map(|f| EvalFrame {
                preds: f.preds.iter().copied().filter(|d| !far(d, &f.gts)).collect(),
                gts: f.gts.clone(),
            })
            .collect();
        prop_assert!(compute_map(&pruned, 2) >= compute_map(&frames, 2) - 1e-15);
        prop_assert_eq!(compute_tp_errors(&pruned, 2), compute_tp_errors(&frames, 2));
    }

    #[test]
    fn scores_stay_in_unit_range(seed in 0u64..10_000, np in 0usize..10, ng in 0usize..6) {
        let mut r = rng(seed);
        let frames: Vec<EvalFrame> = (0..2).map(|_| random_frame(&mut r, np, ng, 3)).collect();
        let res = evaluate(&frames, 3);
        prop_assert!((0.0..=1.0).contains(&res.map));
        prop_assert!((0.0..=1.0).contains(&res.composite));
        prop_assert!(res.aoe <= PI + 1e-12);
    }
}
