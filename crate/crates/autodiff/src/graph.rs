//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because inputs always precede their consumers.
//!
//! Shape preconditions on individual ops are programmer errors and panic;
//! callers that accept external data validate shapes before building graphs.

use std::collections::{BTreeMap, HashMap};

use crate::kernels::{self, DeformDims};
use crate::linalg::gemm;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, len: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, k: usize, cols: Vec<f64> },
    Bilinear { grid: Var, points: Var },
    Deform { values: Vec<Var>, loc: Var, attn: Var, dims: DeformDims },
    Focal { logits: Var, target: Tensor, alpha: f64, beta: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`]; populated for leaf nodes only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `v`, if any reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Computation graph.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<String, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// A graph in which no node requires gradients; used for inference and
    /// for computing frozen inputs.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (when the graph records gradients).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds the named parameter of `store` as a leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Makes later [`Graph::param`] calls for `name` return `v` instead of
    /// reading the store. Used to differentiate with respect to parameters
    /// supplied as ordinary inputs.
    pub fn bind_param(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects per-parameter gradients by name. Parameters that were bound
    /// but received no gradient are reported as zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant copy of `v`'s value, cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let value = self.zip_map(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let value = self.zip_map(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let value = self.zip_map(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Sums a non-empty list of same-shaped nodes.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        let (&first, rest) = vars.split_first().expect("add_n of nothing");
        rest.iter().fold(first, |acc, &v| self.add(acc, v))
    }

    /// `x[..., C] + b[C]`, broadcasting `b` over all leading dimensions.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let c = self.value(x).last_dim();
        assert_eq!(self.value(b).len(), c, "add_row: bias length");
        let bv = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bv) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(x, b), &[x, b])
    }

    /// `x[..., C] * g[C]`, broadcasting `g` over all leading dimensions.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let c = self.value(x).last_dim();
        assert_eq!(self.value(g).len(), c, "mul_row: scale length");
        let gv = self.value(g).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, g) in row.iter_mut().zip(&gv) {
                *v *= g;
            }
        }
        self.push(value, Op::MulRow(x, g), &[x, g])
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let value = Tensor::new(&[m, n], out).expect("matmul shape");
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "transpose expects a matrix");
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out).expect("transpose shape");
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 || x.is_nan() { x } else { 0.0 });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| kernels::sigmoid_pair(x).0);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a), &[a])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let c = self.value(a).last_dim();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let c = self.value(a).last_dim();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// Normalizes each row over the last dimension to zero mean, unit variance
    /// (no affine terms; compose with [`Graph::mul_row`] / [`Graph::add_row`]).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let c = self.value(a).last_dim();
        let mut value = self.value(a).clone();
        let mut rstd = Vec::with_capacity(value.len() / c.max(1));
        for row in value.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        self.push(value, Op::LayerNorm { x: a, rstd }, &[a])
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let lead: Vec<usize> = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat: leading dims differ");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, out).expect("concat shape");
        self.push(value, Op::Concat(parts.to_vec()), parts)
    }

    /// Channels `start..start+len` of the last dimension.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        let c = s[s.len() - 1];
        assert!(start + len <= c, "slice_last out of range");
        let src = self.value(a).data();
        let rows = src.len() / c;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().expect("non-scalar") = len;
        let value = Tensor::new(&shape, out).expect("slice shape");
        self.push(value, Op::Slice { x: a, start, len }, &[a])
    }

    /// Gathers rows of a 2-D tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "select_rows expects a matrix");
        let c = s[1];
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(&[rows.len(), c], out).expect("select shape");
        self.push(
            value,
            Op::SelectRows {
                x: a,
                rows: rows.to_vec(),
            },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let value = Tensor::scalar(self.value(a).sum() / n as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    /// Stride-1 zero-padded `k x k` convolution over a `[H, W, Cin]` map with
    /// weights `[k*k*Cin, Cout]` and optional bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, k: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "conv2d expects [H, W, C], got {xs:?}");
        assert!(k % 2 == 1, "conv2d kernel must be odd");
        let (h, wd, cin) = (xs[0], xs[1], xs[2]);
        let ws = self.shape(w);
        assert!(ws.len() == 2 && ws[0] == k * k * cin, "conv2d weight {ws:?} for cin={cin}, k={k}");
        let cout = ws[1];
        let cols = if k == 1 {
            Vec::new()
        } else {
            kernels::im2col(self.value(x).data(), h, wd, cin, k)
        };
        let lhs: &[f64] = if k == 1 { self.value(x).data() } else { &cols };
        let mut out = vec![0.0; h * wd * cout];
        gemm(h * wd, k * k * cin, cout, lhs, false, self.value(w).data(), false, &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), cout, "conv2d bias length");
            for row in out.chunks_mut(cout) {
                for (o, b) in row.iter_mut().zip(bv) {
                    *o += b;
                }
            }
        }
        let value = Tensor::new(&[h, wd, cout], out).expect("conv shape");
        let mut inputs = vec![x, w];
        inputs.extend(b);
        // Columns are only needed for the weight gradient.
        let keep_cols = k > 1 && self.grad_enabled && self.requires_grad(w);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                k,
                cols: if keep_cols { cols } else { Vec::new() },
            },
            &inputs,
        )
    }

    /// Bilinear sampling of `grid` (`[H, W, C]`) at `points` (`[P, 2]`, as
    /// `(row, col)` continuous coordinates), zero padding outside.
    pub fn bilinear_sample(&mut self, grid: Var, points: Var) -> Var {
        let gs = self.shape(grid).to_vec();
        assert_eq!(gs.len(), 3, "bilinear_sample grid must be [H, W, C]");
        let ps = self.shape(points);
        assert!(ps.len() == 2 && ps[1] == 2, "bilinear_sample points must be [P, 2]");
        let np = ps[0];
        let out = kernels::bilinear_forward(self.value(grid).data(), gs[0], gs[1], gs[2], self.value(points).data());
        let value = Tensor::new(&[np, gs[2]], out).expect("sample shape");
        self.push(value, Op::Bilinear { grid, points }, &[grid, points])
    }

    /// Multi-map, multi-head deformable sampling.
    ///
    /// * `values`: `L` maps, each `[H, W, C]`
    /// * `loc`: `[Q, heads, L, P, 2]` sampling coordinates
    /// * `attn`: `[Q, heads, L * P]` attention weights
    ///
    /// Returns `[Q, C]`, where head `h` owns channels `h*C/heads..(h+1)*C/heads`.
    pub fn deform_sample(&mut self, values: &[Var], loc: Var, attn: Var) -> Var {
        assert!(!values.is_empty(), "deform_sample needs at least one value map");
        let vs = self.shape(values[0]).to_vec();
        assert_eq!(vs.len(), 3, "value maps must be [H, W, C]");
        for &v in values {
            assert_eq!(self.shape(v), &vs[..], "value maps must share a shape");
        }
        let ls = self.shape(loc).to_vec();
        assert!(ls.len() == 5 && ls[2] == values.len() && ls[4] == 2, "bad loc shape {ls:?}");
        let dims = DeformDims {
            queries: ls[0],
            heads: ls[1],
            maps: ls[2],
            points: ls[3],
            h: vs[0],
            w: vs[1],
            c: vs[2],
        };
        assert_eq!(dims.c % dims.heads, 0, "channels not divisible by heads");
        assert_eq!(
            self.shape(attn),
            &[dims.queries, dims.heads, dims.maps * dims.points],
            "bad attn shape"
        );
        let maps: Vec<&[f64]> = values.iter().map(|&v| self.value(v).data()).collect();
        let out = kernels::deform_forward(dims, &maps, self.value(loc).data(), self.value(attn).data());
        let value = Tensor::new(&[dims.queries, dims.c], out).expect("deform shape");
        let mut inputs = values.to_vec();
        inputs.push(loc);
        inputs.push(attn);
        self.push(
            value,
            Op::Deform {
                values: values.to_vec(),
                loc,
                attn,
                dims,
            },
            &inputs,
        )
    }

    /// Summed penalty-reduced focal loss between `logits` and a soft target
    /// heatmap of the same shape. Target cells equal to 1 are positives.
    pub fn sigmoid_focal_loss(&mut self, logits: Var, target: &Tensor, alpha: f64, beta: f64) -> Var {
        assert_eq!(self.shape(logits), target.shape(), "focal: shape mismatch");
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| kernels::focal_term(x, t, alpha, beta).0)
            .sum();
        self.push(
            Tensor::scalar(total),
            Op::Focal {
                logits,
                target: target.clone(),
                alpha,
                beta,
            },
            &[logits],
        )
    }

    /// Reverse-mode differentiation of the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v), data).expect("gradient shape")
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga: Vec<f64> = gd.iter().zip(bv).map(|(g, b)| g * b).collect();
                let gb: Vec<f64> = gd.iter().zip(av).map(|(g, a)| g * a).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
                self.accumulate(grads, *b, self.like(*b, gb));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddRow(x, b) => {
                let c = self.value(*b).len();
                let mut gb = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *b, self.like(*b, gb));
            }
            Op::MulRow(x, s) => {
                let c = self.value(*s).len();
                let sv = self.value(*s).data();
                let xv = self.value(*x).data();
                let mut gs = vec![0.0; c];
                let mut gx = vec![0.0; gd.len()];
                for (r, row) in gd.chunks(c).enumerate() {
                    for k in 0..c {
                        gs[k] += row[k] * xv[r * c + k];
                        gx[r * c + k] = row[k] * sv[k];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
                self.accumulate(grads, *s, self.like(*s, gs));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(*b).data(), true, &mut ga, 0.0);
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = gd[j * r + i];
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, self.like(*a, gd.to_vec())),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let ga = gd.iter().zip(av).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let ga = gd.iter().zip(y).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(av)
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Softmax(a) => {
                let c = node.value.last_dim();
                let y = node.value.data();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in gd.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for k in 0..c {
                        out[k] = yr[k] * (gr[k] - dot);
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::LogSoftmax(a) => {
                let c = node.value.last_dim();
                let y = node.value.data();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in gd.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for k in 0..c {
                        out[k] = gr[k] - yr[k].exp() * s;
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::LayerNorm { x, rstd } => {
                let c = node.value.last_dim();
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for (r, ((gr, yr), out)) in gd.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                    for k in 0..c {
                        out[k] = rstd[r] * (gr[k] - mg - yr[k] * mgy);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = gd.len() / total;
                let mut off = 0;
                for &p in parts {
                    let wd = self.value(p).last_dim();
                    let mut gp = Vec::with_capacity(rows * wd);
                    for r in 0..rows {
                        gp.extend_from_slice(&gd[r * total + off..r * total + off + wd]);
                    }
                    off += wd;
                    self.accumulate(grads, p, self.like(p, gp));
                }
            }
            Op::Slice { x, start, len } => {
                let c = self.value(*x).last_dim();
                let rows = gd.len() / len;
                let mut gx = vec![0.0; rows * c];
                for r in 0..rows {
                    gx[r * c + start..r * c + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::SelectRows { x, rows } => {
                let c = self.value(*x).last_dim();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for k in 0..c {
                        gx[r * c + k] += gd[i * c + k];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, vec![gd[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, vec![gd[0] / n.max(1) as f64; n]));
            }
            Op::Conv2d { x, w, b, k, cols } => {
                let xs = self.shape(*x);
                let (h, wd, cin) = (xs[0], xs[1], xs[2]);
                let cout = node.value.last_dim();
                let kk = k * k * cin;
                if let Some(b) = b {
                    if self.nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; cout];
                        for row in gd.chunks(cout) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(grads, *b, self.like(*b, gb));
                    }
                }
                if self.nodes[w.0].requires_grad {
                    let lhs: &[f64] = if *k == 1 { self.value(*x).data() } else { cols };
                    let mut gw = vec![0.0; kk * cout];
                    gemm(kk, h * wd, cout, lhs, true, gd, false, &mut gw, 0.0);
                    self.accumulate(grads, *w, self.like(*w, gw));
                }
                if self.nodes[x.0].requires_grad {
                    let mut gcols = vec![0.0; h * wd * kk];
                    gemm(h * wd, cout, kk, gd, false, self.value(*w).data(), true, &mut gcols, 0.0);
                    let gx = if *k == 1 {
                        gcols
                    } else {
                        kernels::col2im(&gcols, h, wd, cin, *k)
                    };
                    self.accumulate(grads, *x, self.like(*x, gx));
                }
            }
            Op::Bilinear { grid, points } => {
                let gs = self.shape(*grid);
                let (gg, gp) = kernels::bilinear_backward(
                    self.value(*grid).data(),
                    gs[0],
                    gs[1],
                    gs[2],
                    self.value(*points).data(),
                    gd,
                );
                self.accumulate(grads, *grid, self.like(*grid, gg));
                self.accumulate(grads, *points, self.like(*points, gp));
            }
            Op::Deform {
                values,
                loc,
                attn,
                dims,
            } => {
                let maps: Vec<&[f64]> = values.iter().map(|&v| self.value(v).data()).collect();
                let (gv, gl, ga) =
                    kernels::deform_backward(*dims, &maps, self.value(*loc).data(), self.value(*attn).data(), gd);
                for (&v, g) in values.iter().zip(gv) {
                    self.accumulate(grads, v, self.like(v, g));
                }
                self.accumulate(grads, *loc, self.like(*loc, gl));
                self.accumulate(grads, *attn, self.like(*attn, ga));
            }
            Op::Focal {
                logits,
                target,
                alpha,
                beta,
            } => {
                let gl = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &t)| gd[0] * kernels::focal_term(x, t, *alpha, *beta).1)
                    .collect();
                self.accumulate(grads, *logits, self.like(*logits, gl));
            }
        }
    }
}
