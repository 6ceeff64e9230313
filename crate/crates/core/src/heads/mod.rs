//! Object decoders: the center-based head and the query-based set head,
//! behind one interface so either can serve as the main decoder or as the
//! historical-prediction decoder.

pub mod center;
pub mod hungarian;
pub mod query;

pub use center::{
    decode_detections, detection_loss_center, encode_center_targets, CenterHead, CenterHeadOutput, CenterTargets,
};
pub use hungarian::{hungarian_match, Assignment};
pub use query::{decode_queries, match_cost, query_loss, set_loss, QueryHead, QueryHeadConfig, QueryHeadOutput};

use hopbev_autodiff::{Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::DeformAttnParams;
use crate::error::Result;
use crate::geometry::BevGridSpec;
use crate::synthworld::Box3D;

/// A scored box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

/// Scalar loss nodes. Terms a head does not use are constant zeros.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub heatmap: Var,
    pub regression: Var,
    pub velocity: Var,
    pub classification: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Center,
    Query,
}

#[derive(Clone, Copy, Debug)]
pub enum HeadOutput {
    Center(CenterHeadOutput),
    Query(QueryHeadOutput),
}

impl HeadOutput {
    /// Refined queries, for the query head.
    pub fn queries(&self) -> Option<Var> {
        match self {
            HeadOutput::Center(_) => None,
            HeadOutput::Query(q) => Some(q.queries),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Center(CenterHead),
    Query(QueryHead),
}

/// Detection thresholds used when turning head outputs into boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub max_det: usize,
    pub score_thresh: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_det: 50,
            score_thresh: 0.05,
        }
    }
}

impl Head {
    pub fn new(
        kind: HeadKind,
        prefix: &str,
        grid: BevGridSpec,
        c: usize,
        classes: usize,
        query: QueryHeadConfig,
        attn: DeformAttnParams,
    ) -> Self {
        match kind {
            HeadKind::Center => Head::Center(CenterHead::new(prefix, c, classes)),
            HeadKind::Query => Head::Query(QueryHead::new(prefix, grid, c, classes, query, attn)),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Center(_) => HeadKind::Center,
            Head::Query(_) => HeadKind::Query,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Head::Center(h) => h.classes,
            Head::Query(h) => h.classes,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        match self {
            Head::Center(h) => h.init(store, rng),
            Head::Query(h) => h.init(store, rng),
        }
    }

    /// `extra` is added to the query head's pre-defined queries; the center
    /// head ignores it.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, bev: Var, extra: Option<Var>) -> Result<HeadOutput> {
        match self {
            Head::Center(h) => h.forward(g, store, bev).map(HeadOutput::Center),
            Head::Query(h) => h.forward(g, store, bev, extra).map(HeadOutput::Query),
        }
    }

    /// Detection loss against `gt` (in the map's ego frame). Boxes outside
    /// the grid are ignored.
    pub fn loss(&self, g: &mut Graph, out: &HeadOutput, gt: &[Box3D], grid: &BevGridSpec) -> Result<LossTerms> {
        let inside: Vec<Box3D> = gt.iter().copied().filter(|b| grid.contains(b.x, b.y)).collect();
        match (self, out) {
            (Head::Center(h), HeadOutput::Center(o)) => {
                let t = encode_center_targets(&inside, grid, h.classes)?;
                detection_loss_center(g, o, &t)
            }
            (Head::Query(h), HeadOutput::Query(o)) => query_loss(g, o, &inside, h.classes),
            _ => Err(crate::Error::Invariant("head output from a different head kind".into())),
        }
    }

    pub fn decode(&self, g: &Graph, out: &HeadOutput, grid: &BevGridSpec, cfg: &DecodeConfig) -> Vec<Detection> {
        match out {
            HeadOutput::Center(o) => decode_detections(
                g.value(o.heatmap_logits),
                g.value(o.reg),
                g.value(o.vel),
                grid,
                cfg.max_det,
                cfg.score_thresh,
            ),
            HeadOutput::Query(o) => decode_queries(g.value(o.logits), g.value(o.boxes), cfg.max_det, cfg.score_thresh),
        }
    }
}
