//! The full detector: per-frame encoder, baseline temporal fusion, main
//! object decoder, optional query fusion, and the training-only historical
//! prediction branch.

use std::ops::RangeInclusive;

use hopbev_autodiff::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::DeformAttnParams;
use crate::bevnet::{BaselineFusion, BevFeature, Encoder};
use crate::error::{Error, Result};
use crate::geometry::BevGridSpec;
use crate::heads::{DecodeConfig, Detection, Head, HeadKind, HeadOutput, QueryHeadConfig};
use crate::hop::{feature_reconstruction_loss, hop_slots, DetachPolicy, HopBranch, HopConfig, TargetMode};
use crate::queryfusion::{collect_history, Adaptor, ConnectionForm};
use crate::synthworld::{mix_seed, obs_channels, rasterize_in_frame, Box3D, NoiseConfig, SceneSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid: BevGridSpec,
    pub classes: usize,
    /// Feature width C.
    pub channels: usize,
    pub encoder_layers: usize,
    /// Number of historical frames N; windows hold N + 1 frames.
    pub history: usize,
    pub attention: DeformAttnParams,
    /// Main object decoder.
    pub head: HeadKind,
    pub query_head: QueryHeadConfig,
    pub decode: DecodeConfig,
    pub detach_policy: DetachPolicy,
    /// Historical object prediction; `null` disables it.
    pub hop: Option<HopConfig>,
    /// Historical query fusion form; requires the query head.
    pub query_fusion: Option<ConnectionForm>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: BevGridSpec::default(),
            classes: 3,
            channels: 64,
            encoder_layers: 4,
            history: 4,
            attention: DeformAttnParams::default(),
            head: HeadKind::Center,
            query_head: QueryHeadConfig::default(),
            decode: DecodeConfig::default(),
            detach_policy: DetachPolicy::FullDetach,
            hop: None,
            query_fusion: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes == 0 {
            return bad("classes must be >= 1");
        }
        if self.channels == 0 {
            return bad("channels must be >= 1");
        }
        if self.encoder_layers < 2 {
            return bad("encoder needs >= 2 layers");
        }
        if self.history == 0 {
            return bad("history must be >= 1");
        }
        if self.query_head.queries == 0 || self.query_head.layers == 0 {
            return bad("query head needs >= 1 query and layer");
        }
        self.attention.validate(self.channels)?;
        if self.query_fusion.is_some() && self.head != HeadKind::Query {
            return bad("query fusion requires the query head as main decoder");
        }
        if let Some(h) = &self.hop {
            h.validate(self.history, self.channels)?;
            if h.long_term {
                self.attention.validate(self.channels / h.reduction)?;
            }
        }
        Ok(())
    }

    /// Frames after the window end needed for targets (1 for future
    /// prediction).
    pub fn lookahead(&self) -> usize {
        usize::from(matches!(self.hop, Some(h) if h.k < 0))
    }

    /// Window end frames usable in a sequence of `frames` frames.
    pub fn valid_window_ends(&self, frames: usize) -> Result<RangeInclusive<usize>> {
        let last = frames.checked_sub(1 + self.lookahead()).filter(|&l| l >= self.history);
        match last {
            Some(last) => Ok(self.history..=last),
            None => Err(Error::Config(format!(
                "sequences of {frames} frames are too short for {} history frames{}",
                self.history,
                if self.lookahead() > 0 { " plus one future frame" } else { "" }
            ))),
        }
    }
}

/// One training/evaluation window: `N + 1` observations drawn in the ego
/// frame of the last one, its ground truth, and (with the historical branch)
/// the dropped frame's ground truth in the same ego frame.
#[derive(Clone, Debug)]
pub struct WindowSample {
    pub obs: Vec<Tensor>,
    pub gt: Vec<Box3D>,
    pub hop_gt: Option<Vec<Box3D>>,
    pub seq_seed: u64,
    pub end: usize,
}

pub fn window_sample(seq: &SceneSequence, end: usize, cfg: &ModelConfig, noise: &NoiseConfig) -> Result<WindowSample> {
    let ends = cfg.valid_window_ends(seq.frames())?;
    if !ends.contains(&end) {
        return Err(Error::Index(format!("window end {end} outside {ends:?}")));
    }
    let first = end - cfg.history;
    let obs = (first..=end)
        .map(|j| rasterize_in_frame(seq, j, end, &cfg.grid, cfg.classes, noise).map(|o| o.values))
        .collect::<Result<Vec<_>>>()?;
    let hop_gt = match &cfg.hop {
        Some(h) => {
            let source = if h.k < 0 { end + 1 } else { end - h.k as usize };
            Some(seq.boxes_in_frame(source, end)?)
        }
        None => None,
    };
    Ok(WindowSample {
        obs,
        gt: seq.gt[end].clone(),
        hop_gt,
        seq_seed: seq.seed,
        end,
    })
}

/// How a frame's encoding takes part in the gradient graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Live {
    Full,
    LastTwo,
    Frozen,
}

/// Scalar loss values of one window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub main: f64,
    pub hop: f64,
    pub feature: f64,
}

/// Graph nodes of one training forward pass.
#[derive(Clone, Debug)]
pub struct TrainForward {
    pub total: Var,
    pub losses: LossBreakdown,
    /// Encoded window, slots `0..=N`.
    pub features: Vec<Var>,
    pub main: HeadOutput,
    pub hop: Option<crate::hop::HopOutput>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub fusion: BaselineFusion,
    pub head: Head,
    pub adaptor: Option<Adaptor>,
    pub hop: Option<HopBranch>,
}

const STREAM_ENCODER: u64 = 1;
const STREAM_FUSION: u64 = 2;
const STREAM_HEAD: u64 = 3;
const STREAM_ADAPTOR: u64 = 4;
const STREAM_HOP: u64 = 5;

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let head = Head::new(cfg.head, "head", cfg.grid, c, cfg.classes, cfg.query_head, cfg.attention);
        let hop = match cfg.hop {
            Some(h) => Some(HopBranch::new(
                "hop",
                h,
                cfg.grid,
                cfg.history,
                c,
                cfg.classes,
                cfg.attention,
                cfg.query_head,
            )?),
            None => None,
        };
        Ok(Self {
            encoder: Encoder::new("encoder", obs_channels(cfg.classes), c, cfg.encoder_layers),
            fusion: BaselineFusion::new("fusion", cfg.history + 1, c),
            head,
            adaptor: cfg.query_fusion.map(|_| Adaptor::new("query_fusion.adaptor", c)),
            hop,
            cfg,
        })
    }

    /// The inference build: identical but without the historical branch.
    pub fn without_hop(&self) -> Model {
        Model {
            cfg: ModelConfig {
                hop: None,
                ..self.cfg.clone()
            },
            hop: None,
            ..self.clone()
        }
    }

    /// Fresh parameters. Each component draws from its own stream, so
    /// adding or removing a component leaves the others' initial values
    /// unchanged.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let rng = |stream| ChaCha8Rng::seed_from_u64(mix_seed(&[seed, stream]));
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng(STREAM_ENCODER));
        self.fusion.init(&mut store, &mut rng(STREAM_FUSION));
        self.head.init(&mut store, &mut rng(STREAM_HEAD));
        if let Some(a) = &self.adaptor {
            a.init(&mut store, &mut rng(STREAM_ADAPTOR));
        }
        if let Some(h) = &self.hop {
            h.init(&mut store, &mut rng(STREAM_HOP));
        }
        store
    }

    /// Gradient participation of each window slot under `policy`. The
    /// current frame is always live; with a weighted historical branch the
    /// frame right after the dropped one also stays live. A zero-weight
    /// branch leaves the main path's gradients exactly as without it.
    pub fn live_modes(&self, policy: DetachPolicy) -> Vec<Live> {
        let n = self.cfg.history;
        let keep = self
            .hop
            .as_ref()
            .filter(|h| h.cfg.aux_loss_weight != 0.0)
            .and_then(|h| hop_slots(h.cfg.k, n).ok())
            .and_then(|(drop, _, _)| drop.map(|d| d + 1));
        (0..=n)
            .map(|s| {
                if s == n || Some(s) == keep {
                    Live::Full
                } else {
                    match policy {
                        DetachPolicy::FullDetach => Live::Frozen,
                        DetachPolicy::KeepLastTwo => Live::LastTwo,
                        DetachPolicy::None => Live::Full,
                    }
                }
            })
            .collect()
    }

    fn check_obs(&self, obs: &[Tensor]) -> Result<()> {
        if obs.len() != self.cfg.history + 1 {
            return Err(Error::Arity(format!(
                "{} observations, expected {}",
                obs.len(),
                self.cfg.history + 1
            )));
        }
        let want = [self.cfg.grid.h(), self.cfg.grid.w(), obs_channels(self.cfg.classes)];
        if let Some(o) = obs.iter().find(|o| o.shape() != want) {
            return Err(Error::Shape(format!("observation {:?}, expected {want:?}", o.shape())));
        }
        Ok(())
    }

    /// Encodes every slot of the window according to `live`.
    pub fn encode_window(&self, g: &mut Graph, store: &ParamStore, obs: &[Tensor], live: &[Live]) -> Result<Vec<Var>> {
        self.check_obs(obs)?;
        let depth = self.encoder.depth();
        obs.iter()
            .zip(live)
            .map(|(o, mode)| match mode {
                Live::Full => {
                    let x = g.constant(o.clone());
                    self.encoder.forward(g, store, x)
                }
                Live::Frozen => {
                    let mut ng = Graph::no_grad();
                    let x = ng.constant(o.clone());
                    let b = self.encoder.forward(&mut ng, store, x)?;
                    Ok(g.constant(ng.value(b).clone()))
                }
                Live::LastTwo => {
                    let mut ng = Graph::no_grad();
                    let x = ng.constant(o.clone());
                    let h = self.encoder.forward_range(&mut ng, store, x, 0, depth - 2);
                    let h = g.constant(ng.value(h).clone());
                    Ok(self.encoder.forward_range(g, store, h, depth - 2, depth))
                }
            })
            .collect()
    }

    /// Output queries of the historical frames `0..N`, decoded in time order
    /// on their own features without gradients.
    pub fn history_queries(&self, store: &ParamStore, history_feats: &[Tensor]) -> Result<Vec<Tensor>> {
        let (Some(form), Some(adaptor)) = (self.cfg.query_fusion, &self.adaptor) else {
            return Ok(Vec::new());
        };
        let n = history_feats.len();
        let mut g = Graph::no_grad();
        let mut outs: Vec<Var> = Vec::with_capacity(n);
        for (s, feat) in history_feats.iter().enumerate() {
            let sel = collect_history(form, &outs, n - s);
            let extra = adaptor.adapt_history(&mut g, store, &sel)?;
            let b = g.constant(feat.clone());
            let out = self.head.forward(&mut g, store, b, extra)?;
            outs.push(out.queries().expect("query head"));
        }
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Historical queries for the current frame from earlier outputs.
    pub fn current_history(&self, g: &mut Graph, store: &ParamStore, outputs: &[Tensor]) -> Result<Option<Var>> {
        let (Some(form), Some(adaptor)) = (self.cfg.query_fusion, &self.adaptor) else {
            return Ok(None);
        };
        let vars: Vec<Var> = outputs.iter().map(|t| g.constant(t.clone())).collect();
        let sel = collect_history(form, &vars, 0);
        adaptor.adapt_history(g, store, &sel)
    }

    /// Main detection path on an encoded window.
    pub fn main_forward(&self, g: &mut Graph, store: &ParamStore, feats: &[Var]) -> Result<HeadOutput> {
        let extra = if self.cfg.query_fusion.is_some() {
            let hist: Vec<Tensor> = feats[..feats.len() - 1].iter().map(|&f| g.value(f).clone()).collect();
            let outs = self.history_queries(store, &hist)?;
            self.current_history(g, store, &outs)?
        } else {
            None
        };
        let fused = self.fusion.forward(g, store, feats)?;
        self.head.forward(g, store, fused, extra)
    }

    /// Loss graph of one window under the configured detach policy.
    pub fn training_forward(&self, g: &mut Graph, store: &ParamStore, sample: &WindowSample) -> Result<TrainForward> {
        let live = self.live_modes(self.cfg.detach_policy);
        let feats = self.encode_window(g, store, &sample.obs, &live)?;
        self.training_forward_from(g, store, sample, feats)
    }

    /// As [`Model::training_forward`], on an already encoded window.
    pub fn training_forward_from(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sample: &WindowSample,
        feats: Vec<Var>,
    ) -> Result<TrainForward> {
        let grid = self.cfg.grid;
        let main = self.main_forward(g, store, &feats)?;
        let main_loss = self.head.loss(g, &main, &sample.gt, &grid)?;
        let mut losses = LossBreakdown {
            main: g.value(main_loss.total).item(),
            ..LossBreakdown::default()
        };
        let mut total = main_loss.total;
        let mut hop_out = None;
        if let Some(hop) = &self.hop {
            let window: Vec<BevFeature> = feats
                .iter()
                .enumerate()
                .map(|(s, &values)| BevFeature {
                    values,
                    frame_index: sample.end + s - self.cfg.history,
                    slot: s,
                })
                .collect();
            let out = hop.forward(g, store, &window)?;
            let w = hop.cfg.aux_loss_weight;
            if matches!(hop.cfg.target_mode, TargetMode::Objects | TargetMode::Both) {
                let gt = sample
                    .hop_gt
                    .as_ref()
                    .ok_or_else(|| Error::Invariant("sample lacks historical targets".into()))?;
                let aux = hop.decoder.loss(g, &out.pred, gt, &grid)?;
                losses.hop = g.value(aux.total).item();
                let scaled = g.scale(aux.total, w);
                total = g.add(total, scaled);
            }
            if matches!(hop.cfg.target_mode, TargetMode::Features | TargetMode::Both) {
                let (drop, _, _) = hop_slots(hop.cfg.k, self.cfg.history)?;
                let drop = drop.ok_or_else(|| Error::Config("feature targets need k >= 1".into()))?;
                let target = g.detach(feats[drop]);
                let mse = feature_reconstruction_loss(g, out.pseudo, target)?;
                losses.feature = g.value(mse).item();
                let scaled = g.scale(mse, w * hop.cfg.feature_loss_weight);
                total = g.add(total, scaled);
            }
            hop_out = Some(out);
        }
        losses.total = g.value(total).item();
        Ok(TrainForward {
            total,
            losses,
            features: feats,
            main,
            hop: hop_out,
        })
    }

    /// Inference on one window: main path only, no gradients. The
    /// historical branch is never touched.
    pub fn infer(&self, store: &ParamStore, obs: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Detection>)> {
        let mut g = Graph::no_grad();
        let live = vec![Live::Full; obs.len()];
        let feats = self.encode_window(&mut g, store, obs, &live)?;
        let out = self.main_forward(&mut g, store, &feats)?;
        let raw = match out {
            HeadOutput::Center(o) => vec![o.heatmap_logits, o.reg, o.vel],
            HeadOutput::Query(o) => vec![o.logits, o.boxes, o.queries],
        };
        let dets = self.head.decode(&g, &out, &self.cfg.grid, &self.cfg.decode);
        Ok((raw.into_iter().map(|v| g.value(v).clone()).collect(), dets))
    }

    pub fn detect(&self, store: &ParamStore, obs: &[Tensor]) -> Result<Vec<Detection>> {
        Ok(self.infer(store, obs)?.1)
    }
}
