//! Multi-head deformable attention over one or more value maps.
//!
//! Each query predicts, per head, per value-map slot and per point, a 2-D
//! sampling offset and an attention logit. Logits are softmaxed jointly over
//! every (map, point) pair of a head, samples are taken bilinearly at
//! `ref + offset_scale * offset`, and the weighted sums of the heads are
//! passed through an output linear map.
//!
//! Offset and logit columns are indexed by slot, so the same value map gets
//! the same parameters whichever subset of slots is present.

use hopbev_autodiff::{Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear};

/// Head/point configuration shared by every deformable-attention block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformAttnParams {
    pub n_heads: usize,
    pub n_points: usize,
    /// Offsets are multiplied by this many cells before being added to the
    /// reference point.
    pub offset_scale: f64,
}

impl Default for DeformAttnParams {
    fn default() -> Self {
        Self {
            n_heads: 4,
            n_points: 4,
            offset_scale: 2.0,
        }
    }
}

impl DeformAttnParams {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.n_heads == 0 || self.n_points == 0 {
            return Err(Error::Config("attention needs >= 1 head and point".into()));
        }
        if !width.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "attention width {width} not divisible by {} heads",
                self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self, width: usize) -> usize {
        width / self.n_heads
    }
}

/// Sampling locations `[Q, heads, maps, points, 2]` and attention weights
/// `[Q, heads, maps * points]` from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SampledAttentionOutput {
    pub values: Var,
    pub locations: Var,
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub params: DeformAttnParams,
    pub q_dim: usize,
    pub v_dim: usize,
    /// Number of distinct value-map slots this block has columns for.
    pub slots: usize,
    pub offsets: Linear,
    pub logits: Linear,
    pub out: Linear,
}

impl DeformAttn {
    pub fn new(prefix: &str, q_dim: usize, v_dim: usize, slots: usize, params: DeformAttnParams) -> Self {
        let hp = params.n_heads * params.n_points * slots;
        Self {
            params,
            q_dim,
            v_dim,
            slots,
            offsets: Linear::new(&format!("{prefix}.offsets"), q_dim, hp * 2, true),
            logits: Linear::new(&format!("{prefix}.logits"), q_dim, hp, true),
            out: Linear::new(&format!("{prefix}.out"), v_dim, v_dim, true),
        }
    }

    /// Offsets and logits start at zero; the output map is random.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.offsets.init(store, rng, Init::Zeros);
        self.logits.init(store, rng, Init::Zeros);
        self.out.init(store, rng, Init::Xavier);
    }

    /// Column ranges of an offset (`per = 2 * points`) or logit
    /// (`per = points`) matrix for the given slots, in `[head][slot]` order.
    fn columns(&self, slots: &[usize], per: usize) -> Vec<(usize, usize)> {
        let mut cols = Vec::with_capacity(self.params.n_heads * slots.len());
        for h in 0..self.params.n_heads {
            for &s in slots {
                cols.push(((h * self.slots + s) * per, per));
            }
        }
        cols
    }

    fn select(&self, g: &mut Graph, store: &ParamStore, lin: &Linear, slots: &[usize], per: usize) -> (Var, Var) {
        let w = g.param(store, &lin.w);
        let b = g.param(store, lin.b.as_deref().expect("bias"));
        if slots.len() == self.slots && slots.iter().enumerate().all(|(i, &s)| i == s) {
            return (w, b);
        }
        let cols = self.columns(slots, per);
        let ws: Vec<Var> = cols.iter().map(|&(s, n)| g.slice_last(w, s, n)).collect();
        let bs: Vec<Var> = cols.iter().map(|&(s, n)| g.slice_last(b, s, n)).collect();
        (g.concat(&ws), g.concat(&bs))
    }

    /// Attends from `query` (`[Q, q_dim]`) at `ref_points` (`[Q, 2]`, grid
    /// coordinates) into `values`, given as `(slot, [H, W, v_dim])` pairs.
    /// Returns `[Q, v_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        ref_points: Var,
        values: &[(usize, Var)],
    ) -> Result<SampledAttentionOutput> {
        let DeformAttnParams {
            n_heads: heads,
            n_points: points,
            offset_scale,
        } = self.params;
        if values.is_empty() {
            return Err(Error::Arity("deformable attention over zero value maps".into()));
        }
        let shape0 = g.shape(values[0].1).to_vec();
        if shape0.len() != 3 || shape0[2] != self.v_dim {
            return Err(Error::Shape(format!(
                "value map shape {shape0:?}, expected [H, W, {}]",
                self.v_dim
            )));
        }
        let mut seen = vec![false; self.slots];
        for &(slot, v) in values {
            if g.shape(v) != shape0.as_slice() {
                return Err(Error::Shape(format!(
                    "value maps differ in shape: {:?} vs {shape0:?}",
                    g.shape(v)
                )));
            }
            if slot >= self.slots || seen[slot] {
                return Err(Error::Invariant(format!("bad or repeated value slot {slot}")));
            }
            seen[slot] = true;
        }
        let qs = g.shape(query).to_vec();
        if qs.len() != 2 || qs[1] != self.q_dim || g.shape(ref_points) != [qs[0], 2] {
            return Err(Error::Shape(format!(
                "query {qs:?} / reference points {:?} do not match q_dim {}",
                g.shape(ref_points),
                self.q_dim
            )));
        }
        let nq = qs[0];
        let maps = values.len();
        let slots: Vec<usize> = values.iter().map(|&(s, _)| s).collect();

        let (wo, bo) = self.select(g, store, &self.offsets, &slots, 2 * points);
        let off = g.matmul(query, wo);
        let off = g.add_row(off, bo);
        let off = g.scale(off, offset_scale);
        let reps = vec![ref_points; heads * maps * points];
        let base = g.concat(&reps);
        let loc = g.add(off, base);
        let loc = g.reshape(loc, &[nq, heads, maps, points, 2]);

        let (wl, bl) = self.select(g, store, &self.logits, &slots, points);
        let logit = g.matmul(query, wl);
        let logit = g.add_row(logit, bl);
        let logit = g.reshape(logit, &[nq * heads, maps * points]);
        let attn = g.softmax(logit);
        let attn = g.reshape(attn, &[nq, heads, maps * points]);

        let vals: Vec<Var> = values.iter().map(|&(_, v)| v).collect();
        let sampled = g.deform_sample(&vals, loc, attn);
        let out = self.out.forward(g, store, sampled);
        Ok(SampledAttentionOutput {
            values: out,
            locations: loc,
            weights: attn,
        })
    }
}

/// Reference points of every cell of an `h x w` grid, row-major, `[h*w, 2]`.
pub fn identity_ref_points(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h * w, 2], |k| {
        let cell = k / 2;
        if k % 2 == 0 {
            (cell / w) as f64
        } else {
            (cell % w) as f64
        }
    })
}

/// Bilinear samples of `grid` (`[H, W, C]`) at continuous `(row, col)`
/// points, with zero padding; one `C`-vector per point.
pub fn bilinear_sample(grid: &Tensor, points: &[(f64, f64)]) -> Vec<Vec<f64>> {
    let mut g = Graph::no_grad();
    let gv = g.constant(grid.clone());
    let flat: Vec<f64> = points.iter().flat_map(|&(u, v)| [u, v]).collect();
    let pv = g.constant(Tensor::new(&[points.len(), 2], flat).expect("points shape"));
    let out = g.bilinear_sample(gv, pv);
    let c = grid.last_dim();
    g.value(out).data().chunks(c.max(1)).map(<[f64]>::to_vec).collect()
}
