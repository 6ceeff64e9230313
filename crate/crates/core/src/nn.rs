//! Small parameterized layers over the autodiff graph. Each layer owns only
//! parameter names; values live in a shared [`ParamStore`].

use hopbev_autodiff::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Initializers for weight matrices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
    /// Identity on the leading square block (linear layers only).
    Identity,
}

fn init_matrix(rng: &mut ChaCha8Rng, init: Init, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    match init {
        Init::Xavier => {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-lim..lim))
        }
        Init::Zeros => Tensor::zeros(shape),
        Init::Identity => {
            let cols = shape[shape.len() - 1];
            Tensor::from_fn(shape, |i| if i / cols == i % cols { 1.0 } else { 0.0 })
        }
    }
}

/// `y = x W + b` over rows of a `[N, din]` input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(prefix: &str, din: usize, dout: usize, bias: bool) -> Self {
        Self {
            w: format!("{prefix}.w"),
            b: bias.then(|| format!("{prefix}.b")),
            din,
            dout,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, init: Init) {
        store.insert(&self.w, init_matrix(rng, init, self.din, self.dout, &[self.din, self.dout]));
        if let Some(b) = &self.b {
            store.insert(b, Tensor::zeros(&[self.dout]));
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, &self.w);
        let y = g.matmul(x, w);
        match &self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Stride-1 "same" convolution over `[H, W, cin]` maps.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: String,
    pub b: String,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new(prefix: &str, k: usize, cin: usize, cout: usize) -> Self {
        Self {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            k,
            cin,
            cout,
        }
    }

    pub fn weight_shape(&self) -> [usize; 2] {
        [self.k * self.k * self.cin, self.cout]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, init: Init) {
        let [rows, cols] = self.weight_shape();
        store.insert(&self.w, init_matrix(rng, init, rows, self.cout, &[rows, cols]));
        store.insert(&self.b, Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, &self.w);
        let b = g.param(store, &self.b);
        g.conv2d(x, w, Some(b), self.k)
    }

    /// Weights that average input-channel groups: output channel `o` gets
    /// `1/groups` from channel `o + c * cout` of each group `c`, at the
    /// kernel center only.
    pub fn group_average_weights(&self) -> Tensor {
        assert_eq!(self.cin % self.cout, 0, "cin must be a multiple of cout");
        let groups = self.cin / self.cout;
        let center = (self.k / 2) * self.k + self.k / 2;
        let [rows, cols] = self.weight_shape();
        let mut t = Tensor::zeros(&[rows, cols]);
        for c in 0..self.cin {
            t.data_mut()[(center * self.cin + c) * cols + c % self.cout] = 1.0 / groups as f64;
        }
        t
    }
}

/// Layer normalization over the last dimension with affine scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(&self.gamma, Tensor::full(&[self.dim], 1.0));
        store.insert(&self.beta, Tensor::zeros(&[self.dim]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let gamma = g.param(store, &self.gamma);
        let beta = g.param(store, &self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// Two-layer ReLU MLP `din -> hidden -> din`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(prefix: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Self {
            l1: Linear::new(&format!("{prefix}.l1"), din, hidden, true),
            l2: Linear::new(&format!("{prefix}.l2"), hidden, dout, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, last: Init) {
        self.l1.init(store, rng, Init::Xavier);
        self.l2.init(store, rng, last);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.l1.forward(g, store, x);
        let h = g.relu(h);
        self.l2.forward(g, store, h)
    }
}

/// Post-norm feed-forward block: `LN(x + MLP(x))` with hidden width `2 * dim`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub mlp: Mlp,
    pub norm: LayerNorm,
}

impl Ffn {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            mlp: Mlp::new(prefix, dim, 2 * dim, dim),
            norm: LayerNorm::new(&format!("{prefix}.norm"), dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.mlp.init(store, rng, Init::Xavier);
        self.norm.init(store);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.mlp.forward(g, store, x);
        let s = g.add(x, y);
        self.norm.forward(g, store, s)
    }
}

/// Reshapes `[H, W, C]` to `[H*W, C]` and back.
pub fn flatten_hw(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    assert_eq!(s.len(), 3, "expected [H, W, C], got {s:?}");
    g.reshape(x, &[s[0] * s[1], s[2]])
}

pub fn unflatten_hw(g: &mut Graph, x: Var, h: usize, w: usize) -> Var {
    let c = g.shape(x)[1];
    g.reshape(x, &[h, w, c])
}
