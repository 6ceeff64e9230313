//! Query-based set-prediction head: learned object queries refined by
//! deformable cross-attention into the BEV map, self-attention and FFNs.

use hopbev_autodiff::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hungarian::{hungarian_match, Assignment};
use super::{Detection, LossTerms};
use crate::attention::{DeformAttn, DeformAttnParams};
use crate::error::{Error, Result};
use crate::geometry::BevGridSpec;
use crate::nn::{Init, LayerNorm, Linear, Mlp};
use crate::queryfusion::merge_queries;
use crate::synthworld::Box3D;

pub const BOX_DIM: usize = 10;
pub const BACKGROUND_WEIGHT: f64 = 0.1;
pub const BOX_GROUP_WEIGHT: f64 = 0.25;
pub const MATCH_CLASS_WEIGHT: f64 = 1.0;
pub const MATCH_CENTER_WEIGHT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryHeadConfig {
    /// Number of object queries M.
    pub queries: usize,
    /// Decoder layers.
    pub layers: usize,
}

impl Default for QueryHeadConfig {
    fn default() -> Self {
        Self { queries: 32, layers: 2 }
    }
}

/// Per-query class logits `[M, classes + 1]` (background last), boxes
/// `[M, 10]` as (x, y, z, log w, log l, log h, sin yaw, cos yaw, vx, vy)
/// with metric centers, and the refined queries `[M, C]`.
#[derive(Clone, Copy, Debug)]
pub struct QueryHeadOutput {
    pub logits: Var,
    pub boxes: Var,
    pub queries: Var,
}

/// Multi-head scaled dot-product self-attention over rows.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl SelfAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Self {
        Self {
            heads,
            q: Linear::new(&format!("{prefix}.q"), dim, dim, true),
            k: Linear::new(&format!("{prefix}.k"), dim, dim, true),
            v: Linear::new(&format!("{prefix}.v"), dim, dim, true),
            out: Linear::new(&format!("{prefix}.out"), dim, dim, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(store, rng, Init::Xavier);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let dim = self.q.dout;
        let hd = dim / self.heads;
        let q = self.q.forward(g, store, x);
        let k = self.k.forward(g, store, x);
        let v = self.v.forward(g, store, x);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_last(q, h * hd, hd);
            let kh = g.slice_last(k, h * hd, hd);
            let vh = g.slice_last(v, h * hd, hd);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, 1.0 / (hd as f64).sqrt());
            let a = g.softmax(s);
            outs.push(g.matmul(a, vh));
        }
        let cat = g.concat(&outs);
        self.out.forward(g, store, cat)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_cross: LayerNorm,
    pub cross: DeformAttn,
    pub norm_self: LayerNorm,
    pub self_attn: SelfAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct QueryHead {
    pub cfg: QueryHeadConfig,
    pub grid: BevGridSpec,
    pub classes: usize,
    pub dim: usize,
    pub embeddings: String,
    pub reference: Linear,
    pub layers: Vec<DecoderLayer>,
    pub norm_out: LayerNorm,
    pub cls: Linear,
    pub bbox: Mlp,
}

impl QueryHead {
    pub fn new(
        prefix: &str,
        grid: BevGridSpec,
        dim: usize,
        classes: usize,
        cfg: QueryHeadConfig,
        attn: DeformAttnParams,
    ) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                DecoderLayer {
                    norm_cross: LayerNorm::new(&format!("{p}.norm_cross"), dim),
                    cross: DeformAttn::new(&format!("{p}.cross"), dim, dim, 1, attn),
                    norm_self: LayerNorm::new(&format!("{p}.norm_self"), dim),
                    self_attn: SelfAttention::new(&format!("{p}.self"), dim, attn.n_heads),
                    norm_ffn: LayerNorm::new(&format!("{p}.norm_ffn"), dim),
                    ffn: Mlp::new(&format!("{p}.ffn"), dim, 2 * dim, dim),
                }
            })
            .collect();
        Self {
            cfg,
            grid,
            classes,
            dim,
            embeddings: format!("{prefix}.embeddings"),
            reference: Linear::new(&format!("{prefix}.reference"), dim, 2, true),
            layers,
            norm_out: LayerNorm::new(&format!("{prefix}.norm_out"), dim),
            cls: Linear::new(&format!("{prefix}.cls"), dim, classes + 1, true),
            bbox: Mlp::new(&format!("{prefix}.bbox"), dim, dim, BOX_DIM),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let m = self.cfg.queries;
        store.insert(&self.embeddings, Tensor::from_fn(&[m, self.dim], |_| rng.random_range(-1.0..1.0)));
        self.reference.init(store, rng, Init::Xavier);
        for l in &self.layers {
            l.norm_cross.init(store);
            l.cross.init(store, rng);
            l.norm_self.init(store);
            l.self_attn.init(store, rng);
            l.norm_ffn.init(store);
            l.ffn.init(store, rng, Init::Xavier);
        }
        self.norm_out.init(store);
        self.cls.init(store, rng, Init::Xavier);
        self.bbox.init(store, rng, Init::Xavier);
    }

    /// The pre-defined queries `O` as a graph node.
    pub fn embeddings(&self, g: &mut Graph, store: &ParamStore) -> Var {
        g.param(store, &self.embeddings)
    }

    /// Decodes `bev` (`[H, W, C]`) with queries `O + extra` (`extra` being
    /// the historical queries, when fused).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bev: Var,
        extra: Option<Var>,
    ) -> Result<QueryHeadOutput> {
        let s = g.shape(bev).to_vec();
        if s != [self.grid.h(), self.grid.w(), self.dim] {
            return Err(Error::Shape(format!("query head input {s:?}, expected [H, W, {}]", self.dim)));
        }
        let o = self.embeddings(g, store);
        let mut q = match extra {
            Some(e) => merge_queries(g, o, e)?,
            None => o,
        };
        // Reference points in continuous grid coordinates, spanning the map.
        let r = self.reference.forward(g, store, q);
        let r = g.sigmoid(r);
        let (h, w) = (self.grid.h(), self.grid.w());
        let extent = g.constant(Tensor::new(&[2], vec![h as f64, w as f64]).expect("2"));
        let r = g.mul_row(r, extent);
        let half = g.constant(Tensor::full(&[2], -0.5));
        let ref_grid = g.add_row(r, half);
        for l in &self.layers {
            let n = l.norm_cross.forward(g, store, q);
            let a = l.cross.forward(g, store, n, ref_grid, &[(0, bev)])?;
            q = g.add(q, a.values);
            let n = l.norm_self.forward(g, store, q);
            let a = l.self_attn.forward(g, store, n);
            q = g.add(q, a);
            let n = l.norm_ffn.forward(g, store, q);
            let f = l.ffn.forward(g, store, n);
            q = g.add(q, f);
        }
        let n = self.norm_out.forward(g, store, q);
        let logits = self.cls.forward(g, store, n);
        let raw = self.bbox.forward(g, store, n);
        // Centers: reference point plus predicted cell offset, in meters.
        let delta = g.slice_last(raw, 0, 2);
        let loc = g.add(ref_grid, delta);
        let center = g.constant(Tensor::new(&[2], vec![-((h / 2) as f64), -((w / 2) as f64)]).expect("2"));
        let loc = g.add_row(loc, center);
        let xy = g.scale(loc, self.grid.cell_size);
        let rest = g.slice_last(raw, 2, BOX_DIM - 2);
        let boxes = g.concat(&[xy, rest]);
        Ok(QueryHeadOutput {
            logits,
            boxes,
            queries: q,
        })
    }
}

/// Box regression target `(x, y, z, log w, log l, log h, sin, cos, vx, vy)`.
pub fn box_target(b: &Box3D) -> [f64; BOX_DIM] {
    [b.x, b.y, b.z, b.w.ln(), b.l.ln(), b.h.ln(), b.yaw.sin(), b.yaw.cos(), b.vx, b.vy]
}

fn softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data()
        .chunks(t.last_dim())
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Matching cost: `-p(gt class) + 0.25 * L1 center distance` (meters).
pub fn match_cost(logits: &Tensor, boxes: &Tensor, gt: &[Box3D]) -> Vec<Vec<f64>> {
    let probs = softmax_rows(logits);
    probs
        .iter()
        .zip(boxes.data().chunks(BOX_DIM))
        .map(|(p, b)| {
            gt.iter()
                .map(|t| -MATCH_CLASS_WEIGHT * p[t.cls] + MATCH_CENTER_WEIGHT * ((b[0] - t.x).abs() + (b[1] - t.y).abs()))
                .collect()
        })
        .collect()
}

/// Set loss for a given matching: weighted cross-entropy (matched queries
/// toward their class, the rest toward background with weight 0.1,
/// normalized by the total weight) plus 0.25-weighted L1 over every box
/// coordinate group of matched queries, normalized by the object count.
pub fn set_loss(
    g: &mut Graph,
    out: &QueryHeadOutput,
    gt: &[Box3D],
    assignment: &Assignment,
    classes: usize,
) -> Result<LossTerms> {
    let m = g.shape(out.logits)[0];
    if g.shape(out.logits) != [m, classes + 1] || assignment.pred_to_gt.len() != m {
        return Err(Error::Shape(format!(
            "logits {:?} / assignment of {} for {classes} classes",
            g.shape(out.logits),
            assignment.pred_to_gt.len()
        )));
    }
    let mut weights = Tensor::zeros(&[m, classes + 1]);
    let mut wsum = 0.0;
    for (p, tgt) in assignment.pred_to_gt.iter().enumerate() {
        let (col, w) = match tgt {
            Some(gi) => (gt[*gi].cls, 1.0),
            None => (classes, BACKGROUND_WEIGHT),
        };
        weights.data_mut()[p * (classes + 1) + col] = w;
        wsum += w;
    }
    let lsm = g.log_softmax(out.logits);
    let wv = g.constant(weights);
    let prod = g.mul(lsm, wv);
    let ce = g.sum(prod);
    let classification = g.scale(ce, -1.0 / wsum);
    let pairs: Vec<(usize, usize)> = assignment.pairs().collect();
    let regression = if pairs.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let rows: Vec<usize> = pairs.iter().map(|&(p, _)| p).collect();
        let tgt: Vec<f64> = pairs.iter().flat_map(|&(_, gi)| box_target(&gt[gi])).collect();
        let picked = g.select_rows(out.boxes, &rows);
        let t = g.constant(Tensor::new(&[pairs.len(), BOX_DIM], tgt).expect("target shape"));
        let d = g.sub(picked, t);
        let a = g.abs(d);
        let s = g.sum(a);
        g.scale(s, BOX_GROUP_WEIGHT / gt.len().max(1) as f64)
    };
    let zero = g.constant(Tensor::scalar(0.0));
    Ok(LossTerms {
        total: g.add(classification, regression),
        heatmap: zero,
        regression,
        velocity: zero,
        classification,
    })
}

/// Matches and scores in one call.
pub fn query_loss(g: &mut Graph, out: &QueryHeadOutput, gt: &[Box3D], classes: usize) -> Result<LossTerms> {
    let cost = match_cost(g.value(out.logits), g.value(out.boxes), gt);
    let assignment = if gt.is_empty() {
        Assignment {
            pred_to_gt: vec![None; g.shape(out.logits)[0]],
            total_cost: 0.0,
        }
    } else {
        hungarian_match(&cost)
    };
    set_loss(g, out, gt, &assignment, classes)
}

/// Detections from query outputs: score is the best foreground probability.
pub fn decode_queries(logits: &Tensor, boxes: &Tensor, max_det: usize, score_thresh: f64) -> Vec<Detection> {
    let classes = logits.last_dim() - 1;
    let mut dets: Vec<(usize, Detection)> = softmax_rows(logits)
        .iter()
        .zip(boxes.data().chunks(BOX_DIM))
        .enumerate()
        .filter_map(|(i, (p, b))| {
            let (cls, &score) = p[..classes]
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |best, (c, s)| if *s > *best.1 { (c, s) } else { best });
            (score >= score_thresh).then(|| {
                (
                    i,
                    Detection {
                        bbox: Box3D {
                            x: b[0],
                            y: b[1],
                            z: b[2],
                            w: b[3].exp(),
                            l: b[4].exp(),
                            h: b[5].exp(),
                            yaw: b[6].atan2(b[7]),
                            vx: b[8],
                            vy: b[9],
                            cls,
                            track_id: 0,
                        },
                        score,
                    },
                )
            })
        })
        .collect();
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    dets.truncate(max_det);
    dets.into_iter().map(|(_, d)| d).collect()
}
