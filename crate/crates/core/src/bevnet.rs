//! Per-frame BEV encoder, temporal slot embeddings and the baseline
//! concatenate-and-convolve temporal fusion.

use hopbev_autodiff::{Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv, Init};

/// One frame's feature map `[H, W, C]` in the current ego frame, tagged with
/// its temporal slot (0 = oldest frame of the window).
#[derive(Clone, Copy, Debug)]
pub struct BevFeature {
    pub values: Var,
    pub frame_index: usize,
    pub slot: usize,
}

/// Stack of 3x3 convolutions `C_obs -> C -> ... -> C` with ReLU between
/// layers (none after the last).
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<Conv>,
}

impl Encoder {
    pub fn new(prefix: &str, cin: usize, c: usize, layers: usize) -> Self {
        let layers = (0..layers)
            .map(|i| Conv::new(&format!("{prefix}.conv{i}"), 3, if i == 0 { cin } else { c }, c))
            .collect();
        Self { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.cout)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for l in &self.layers {
            l.init(store, rng, Init::Xavier);
        }
    }

    /// Runs layers `from..to`, where `x` is the input of layer `from`.
    pub fn forward_range(&self, g: &mut Graph, store: &ParamStore, x: Var, from: usize, to: usize) -> Var {
        let mut h = x;
        for i in from..to {
            h = self.layers[i].forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, obs: Var) -> Result<Var> {
        let s = g.shape(obs);
        let cin = self.layers.first().map_or(0, |l| l.cin);
        if s.len() != 3 || s[2] != cin {
            return Err(Error::Shape(format!("observation {s:?}, expected [H, W, {cin}]")));
        }
        Ok(self.forward_range(g, store, obs, 0, self.depth()))
    }
}

/// Learned per-slot vectors added to every cell of a frame's features.
#[derive(Clone, Debug)]
pub struct TemporalPosEmbed {
    pub name: String,
    pub slots: usize,
    pub c: usize,
}

impl TemporalPosEmbed {
    pub fn new(name: &str, slots: usize, c: usize) -> Self {
        Self {
            name: name.into(),
            slots,
            c,
        }
    }

    /// Zero-initialized, so the embedding starts as a no-op.
    pub fn init(&self, store: &mut ParamStore) {
        store.insert(&self.name, Tensor::zeros(&[self.slots, self.c]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: &[BevFeature]) -> Result<Vec<BevFeature>> {
        let mut seen = vec![false; self.slots];
        for f in feats {
            if f.slot >= self.slots || seen[f.slot] {
                return Err(Error::Invariant(format!("slot {} repeated or out of range", f.slot)));
            }
            seen[f.slot] = true;
        }
        let table = g.param(store, &self.name);
        Ok(feats
            .iter()
            .map(|f| {
                let row = g.select_rows(table, &[f.slot]);
                let row = g.reshape(row, &[self.c]);
                BevFeature {
                    values: g.add_row(f.values, row),
                    ..*f
                }
            })
            .collect())
    }
}

/// Concatenates the window in slot order, then a 1x1 and a 3x3 convolution
/// back to `C` channels. Initialized to average the slots and pass the
/// average through unchanged.
#[derive(Clone, Debug)]
pub struct BaselineFusion {
    pub frames: usize,
    pub reduce: Conv,
    pub mix: Conv,
}

impl BaselineFusion {
    pub fn new(prefix: &str, frames: usize, c: usize) -> Self {
        Self {
            frames,
            reduce: Conv::new(&format!("{prefix}.reduce"), 1, frames * c, c),
            mix: Conv::new(&format!("{prefix}.mix"), 3, c, c),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.reduce.init(store, rng, Init::Zeros);
        self.mix.init(store, rng, Init::Zeros);
        store.set(&self.reduce.w, self.reduce.group_average_weights());
        store.set(&self.mix.w, self.mix.group_average_weights());
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: &[Var]) -> Result<Var> {
        if feats.len() != self.frames {
            return Err(Error::Arity(format!(
                "baseline fusion expects {} frames, got {}",
                self.frames,
                feats.len()
            )));
        }
        let x = g.concat(feats);
        let x = self.reduce.forward(g, store, x);
        Ok(self.mix.forward(g, store, x))
    }
}
