//! Historical query fusion: adapted output queries of earlier frames are
//! added to the pre-defined queries before decoding the next frame.

use hopbev_autodiff::{Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Mlp};

/// Which earlier outputs feed the historical queries of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionForm {
    /// Only the immediately preceding frame.
    Recurrent,
    /// All earlier frames, for the current frame only.
    FullyConnected,
    /// All earlier frames, for every frame.
    Dense,
}

pub const EXPANSION: usize = 4;

/// Two-layer MLP `C -> 4C -> C`; the last layer starts at zero so fusion
/// begins as a no-op.
#[derive(Clone, Debug)]
pub struct Adaptor {
    pub mlp: Mlp,
    pub dim: usize,
}

impl Adaptor {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            mlp: Mlp::new(prefix, dim, EXPANSION * dim, dim),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.mlp.init(store, rng, Init::Zeros);
    }

    /// Historical queries from a list of output query sets (`[M, C]` each):
    /// per-index mean over the list, then the MLP. `None` for an empty list,
    /// which stands for an all-zero set.
    pub fn adapt_history(&self, g: &mut Graph, store: &ParamStore, hist: &[Var]) -> Result<Option<Var>> {
        let Some(&first) = hist.first() else {
            return Ok(None);
        };
        let shape = g.shape(first).to_vec();
        if shape.len() != 2 || shape[1] != self.dim || hist.iter().any(|&h| g.shape(h) != shape.as_slice()) {
            return Err(Error::Shape(format!("history query sets must all be [M, {}]", self.dim)));
        }
        let mean = if hist.len() == 1 {
            first
        } else {
            let s = g.add_n(hist);
            g.scale(s, 1.0 / hist.len() as f64)
        };
        Ok(Some(self.mlp.forward(g, store, mean)))
    }
}

/// Selects which of `outputs` (earlier frames' output queries, oldest
/// first, ending at `t - k - 1`) feed the frame `t - k`.
pub fn collect_history<T: Copy>(form: ConnectionForm, outputs: &[T], k: usize) -> Vec<T> {
    match form {
        ConnectionForm::Recurrent => outputs.last().copied().into_iter().collect(),
        ConnectionForm::FullyConnected if k == 0 => outputs.to_vec(),
        ConnectionForm::FullyConnected => Vec::new(),
        ConnectionForm::Dense => outputs.to_vec(),
    }
}

/// `O + O_his`.
pub fn merge_queries(g: &mut Graph, o: Var, o_his: Var) -> Result<Var> {
    if g.shape(o) != g.shape(o_his) {
        return Err(Error::Shape(format!("{:?} vs {:?}", g.shape(o), g.shape(o_his))));
    }
    Ok(g.add(o, o_his))
}

/// A zero historical query set.
pub fn zero_history(m: usize, dim: usize) -> Tensor {
    Tensor::zeros(&[m, dim])
}
