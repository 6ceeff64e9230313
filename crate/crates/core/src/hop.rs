//! Historical object prediction: reconstruct the feature map of a dropped
//! frame from the rest of the window with a short-term and a long-term
//! deformable decoder, then detect objects on the reconstruction.

use hopbev_autodiff::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{identity_ref_points, DeformAttn, DeformAttnParams};
use crate::bevnet::{BevFeature, TemporalPosEmbed};
use crate::error::{Error, Result};
use crate::geometry::BevGridSpec;
use crate::heads::{Head, HeadKind, HeadOutput, QueryHeadConfig};
use crate::nn::{flatten_hw, unflatten_hw, Conv, Ffn, Init, Linear};

/// Which historical frames keep gradients into the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetachPolicy {
    /// Historical features carry no gradient.
    FullDetach,
    /// Historical features carry gradient through the final two encoder
    /// layers only.
    KeepLastTwo,
    /// Historical features are fully differentiable.
    None,
}

/// What the reconstructed map is supervised with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    Objects,
    Features,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HopConfig {
    /// Prediction index: the dropped frame is `t - k`; `-1` predicts `t + 1`.
    pub k: i64,
    pub aux_loss_weight: f64,
    pub feature_loss_weight: f64,
    pub target_mode: TargetMode,
    /// Object decoder used on the reconstruction.
    pub decoder: HeadKind,
    pub short_term: bool,
    pub long_term: bool,
    /// Long-term channel reduction ratio.
    pub reduction: usize,
}

impl Default for HopConfig {
    fn default() -> Self {
        Self {
            k: 1,
            aux_loss_weight: 1.0,
            feature_loss_weight: 1.0,
            target_mode: TargetMode::Objects,
            decoder: HeadKind::Center,
            short_term: true,
            long_term: true,
            reduction: 4,
        }
    }
}

impl HopConfig {
    pub fn validate(&self, history: usize, channels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return Err(Error::Invariant(
                "k = 0 is the current frame, which the main detector handles".into(),
            ));
        }
        if self.k < -1 || self.k > history as i64 {
            return bad(format!("k = {} outside [-1, {history}] without 0", self.k));
        }
        if !(self.aux_loss_weight >= 0.0) || !(self.feature_loss_weight >= 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        if !self.short_term && !self.long_term {
            return bad("at least one temporal decoder branch must be enabled".into());
        }
        if self.reduction == 0 || !channels.is_multiple_of(self.reduction) {
            return bad(format!("channels {channels} not divisible by reduction {}", self.reduction));
        }
        if self.k < 0 && self.target_mode != TargetMode::Objects {
            return bad("feature targets need a historical frame (k >= 1)".into());
        }
        Ok(())
    }
}

/// Slot of the dropped frame (`None` for future prediction) and the adjacent
/// and remaining slot sets for a window of `history + 1` frames.
pub fn hop_slots(k: i64, history: usize) -> Result<(Option<usize>, Vec<usize>, Vec<usize>)> {
    if k == 0 {
        return Err(Error::Invariant("k = 0 is not a historical frame".into()));
    }
    if k == -1 {
        return Ok((None, vec![history], (0..=history).collect()));
    }
    if k < -1 || k > history as i64 {
        return Err(Error::Config(format!("k = {k} outside the window of {history} history frames")));
    }
    let drop = history - k as usize;
    let mut adj = Vec::with_capacity(2);
    if drop > 0 {
        adj.push(drop - 1);
    }
    if drop < history {
        adj.push(drop + 1);
    }
    let rem = (0..=history).filter(|&s| s != drop).collect();
    Ok((Some(drop), adj, rem))
}

/// Output of one temporal decoder branch, before and after its FFN.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    pub attended: Var,
    pub out: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HopOutput {
    pub pseudo: Var,
    pub pred: HeadOutput,
    pub short: Option<BranchOutput>,
    pub long: Option<BranchOutput>,
}

#[derive(Clone, Debug)]
pub struct ShortTermDecoder {
    pub queries: String,
    pub attn: DeformAttn,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct LongTermDecoder {
    pub queries: String,
    pub reduce: String,
    pub attn: DeformAttn,
    pub ffn: Ffn,
    pub expand: Linear,
}

#[derive(Clone, Debug)]
pub struct HopBranch {
    pub cfg: HopConfig,
    pub grid: BevGridSpec,
    pub history: usize,
    pub channels: usize,
    pub pos: TemporalPosEmbed,
    pub short: Option<ShortTermDecoder>,
    pub long: Option<LongTermDecoder>,
    pub fuse: Conv,
    pub decoder: Head,
}

impl HopBranch {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        cfg: HopConfig,
        grid: BevGridSpec,
        history: usize,
        channels: usize,
        classes: usize,
        attn: DeformAttnParams,
        query: QueryHeadConfig,
    ) -> Result<Self> {
        cfg.validate(history, channels)?;
        let slots = history + 1;
        let c = channels;
        let cr = c / cfg.reduction;
        attn.validate(c)?;
        attn.validate(cr)?;
        let short = cfg.short_term.then(|| ShortTermDecoder {
            queries: format!("{prefix}.short.queries"),
            attn: DeformAttn::new(&format!("{prefix}.short.attn"), c, c, slots, attn),
            ffn: Ffn::new(&format!("{prefix}.short.ffn"), c),
        });
        let long = cfg.long_term.then(|| LongTermDecoder {
            queries: format!("{prefix}.long.queries"),
            reduce: format!("{prefix}.long.reduce"),
            attn: DeformAttn::new(&format!("{prefix}.long.attn"), cr, cr, slots, attn),
            ffn: Ffn::new(&format!("{prefix}.long.ffn"), cr),
            expand: Linear::new(&format!("{prefix}.long.expand"), cr, c, false),
        });
        let branches = usize::from(cfg.short_term) + usize::from(cfg.long_term);
        Ok(Self {
            cfg,
            grid,
            history,
            channels,
            pos: TemporalPosEmbed::new(&format!("{prefix}.pos_embed"), slots, c),
            short,
            long,
            fuse: Conv::new(&format!("{prefix}.fuse"), 3, branches * c, c),
            decoder: Head::new(cfg.decoder, &format!("{prefix}.decoder"), grid, c, classes, query, attn),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let hw = self.grid.h() * self.grid.w();
        self.pos.init(store);
        if let Some(s) = &self.short {
            store.insert(&s.queries, Tensor::from_fn(&[hw, self.channels], |_| rng.random_range(-1.0..1.0)));
            s.attn.init(store, rng);
            s.ffn.init(store, rng);
        }
        if let Some(l) = &self.long {
            let cr = self.channels / self.cfg.reduction;
            store.insert(&l.queries, Tensor::from_fn(&[hw, cr], |_| rng.random_range(-1.0..1.0)));
            let lim = (6.0 / (self.channels + cr) as f64).sqrt();
            store.insert(&l.reduce, Tensor::from_fn(&[self.channels, cr], |_| rng.random_range(-lim..lim)));
            l.attn.init(store, rng);
            l.ffn.init(store, rng);
            l.expand.init(store, rng, Init::Xavier);
        }
        self.fuse.init(store, rng, Init::Xavier);
        self.decoder.init(store, rng);
    }

    fn check_maps(&self, g: &Graph, maps: &[BevFeature]) -> Result<()> {
        let want = [self.grid.h(), self.grid.w(), self.channels];
        for m in maps {
            if g.shape(m.values) != want {
                return Err(Error::Shape(format!("feature {:?}, expected {want:?}", g.shape(m.values))));
            }
        }
        Ok(())
    }

    /// Deformable attention from the short-term query grid into the
    /// adjacent maps, followed by the branch FFN. Returns `[H, W, C]`.
    pub fn short_term_decode(&self, g: &mut Graph, store: &ParamStore, adj: &[BevFeature]) -> Result<BranchOutput> {
        let dec = self
            .short
            .as_ref()
            .ok_or_else(|| Error::Config("short-term branch disabled".into()))?;
        if adj.is_empty() {
            return Err(Error::Arity("short-term decoder needs at least one adjacent map".into()));
        }
        self.check_maps(g, adj)?;
        let (h, w) = (self.grid.h(), self.grid.w());
        let q = g.param(store, &dec.queries);
        let r = g.constant(identity_ref_points(h, w));
        let values: Vec<(usize, Var)> = adj.iter().map(|f| (f.slot, f.values)).collect();
        let a = dec.attn.forward(g, store, q, r, &values)?;
        let out = dec.ffn.forward(g, store, a.values);
        Ok(BranchOutput {
            attended: unflatten_hw(g, a.values, h, w),
            out: unflatten_hw(g, out, h, w),
        })
    }

    /// Channel-reduces every remaining map, attends from the long-term query
    /// grid, applies the branch FFN and expands back to `C`. Returns
    /// `[H, W, C]` (`attended` is at the reduced width).
    pub fn long_term_decode(&self, g: &mut Graph, store: &ParamStore, rem: &[BevFeature]) -> Result<BranchOutput> {
        let dec = self
            .long
            .as_ref()
            .ok_or_else(|| Error::Config("long-term branch disabled".into()))?;
        if rem.is_empty() {
            return Err(Error::Arity("long-term decoder needs at least one map".into()));
        }
        if let (Some(drop), _, _) = hop_slots(self.cfg.k, self.history)? {
            if rem.iter().any(|f| f.slot == drop) {
                return Err(Error::Invariant(format!("dropped slot {drop} passed to the long-term decoder")));
            }
        }
        self.check_maps(g, rem)?;
        let (h, w) = (self.grid.h(), self.grid.w());
        let wr = g.param(store, &dec.reduce);
        let mut values = Vec::with_capacity(rem.len());
        for f in rem {
            let flat = flatten_hw(g, f.values);
            let red = g.matmul(flat, wr);
            values.push((f.slot, unflatten_hw(g, red, h, w)));
        }
        let q = g.param(store, &dec.queries);
        let r = g.constant(identity_ref_points(h, w));
        let a = dec.attn.forward(g, store, q, r, &values)?;
        let y = dec.ffn.forward(g, store, a.values);
        let out = dec.expand.forward(g, store, y);
        Ok(BranchOutput {
            attended: unflatten_hw(g, a.values, h, w),
            out: unflatten_hw(g, out, h, w),
        })
    }

    /// Concatenates the enabled branch outputs and applies the 3x3 fusion.
    pub fn fuse_pseudo(&self, g: &mut Graph, store: &ParamStore, branches: &[Var]) -> Result<Var> {
        let want = [self.grid.h(), self.grid.w(), self.channels];
        if branches.len() * self.channels != self.fuse.cin || branches.iter().any(|&b| g.shape(b) != want) {
            return Err(Error::Shape(format!(
                "fusion expects {} maps of {want:?}",
                self.fuse.cin / self.channels
            )));
        }
        let x = if branches.len() == 1 { branches[0] } else { g.concat(branches) };
        Ok(self.fuse.forward(g, store, x))
    }

    /// Drops the target frame, adds slot embeddings, decodes the pseudo map
    /// and runs the object decoder on it. `window` holds slots `0..=N`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, window: &[BevFeature]) -> Result<HopOutput> {
        if window.len() != self.history + 1 {
            return Err(Error::Arity(format!(
                "window of {} maps, expected {}",
                window.len(),
                self.history + 1
            )));
        }
        let (drop, adj, rem) = hop_slots(self.cfg.k, self.history)?;
        let kept: Vec<BevFeature> = window.iter().copied().filter(|f| Some(f.slot) != drop).collect();
        let kept = self.pos.forward(g, store, &kept)?;
        let pick = |slots: &[usize]| -> Result<Vec<BevFeature>> {
            slots
                .iter()
                .map(|s| {
                    kept.iter()
                        .copied()
                        .find(|f| f.slot == *s)
                        .ok_or_else(|| Error::Invariant(format!("slot {s} missing from the window")))
                })
                .collect()
        };
        let mut parts = Vec::with_capacity(2);
        let short = match self.short {
            Some(_) => Some(self.short_term_decode(g, store, &pick(&adj)?)?),
            None => None,
        };
        let long = match self.long {
            Some(_) => Some(self.long_term_decode(g, store, &pick(&rem)?)?),
            None => None,
        };
        parts.extend(short.map(|b| b.out));
        parts.extend(long.map(|b| b.out));
        let pseudo = self.fuse_pseudo(g, store, &parts)?;
        let pred = self.decoder.forward(g, store, pseudo, None)?;
        Ok(HopOutput {
            pseudo,
            pred,
            short,
            long,
        })
    }
}

/// Mean squared error between the reconstruction and a detached target map.
pub fn feature_reconstruction_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.requires_grad(target) {
        return Err(Error::Invariant("feature target must be detached".into()));
    }
    if g.shape(pred) != g.shape(target) {
        return Err(Error::Shape(format!("{:?} vs {:?}", g.shape(pred), g.shape(target))));
    }
    let d = g.sub(pred, target);
    let sq = g.mul(d, d);
    Ok(g.mean(sq))
}
