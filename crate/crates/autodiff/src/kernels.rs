//! Raw forward/backward kernels for the convolution and sampling ops.
//!
//! Feature maps are channel-last: a `[H, W, C]` map stores cell `(i, j)`'s
//! channels contiguously at offset `(i * W + j) * C`. Continuous sampling
//! coordinates are `(u, v)` with `u` along rows and `v` along columns; cell
//! centers sit at integer coordinates.

/// One bilinear tap: flat cell index, interpolation weight, and the weight's
/// partial derivatives with respect to `u` and `v`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub cell: usize,
    pub w: f64,
    pub dw_du: f64,
    pub dw_dv: f64,
}

/// The up-to-four in-bounds taps for point `(u, v)`; out-of-bounds neighbors
/// contribute zero (zero padding). Returns `None` for non-finite points.
pub(crate) fn taps(h: usize, w: usize, u: f64, v: f64) -> Option<([Tap; 4], usize)> {
    if !u.is_finite() || !v.is_finite() {
        return None;
    }
    let iu = u.floor();
    let iv = v.floor();
    let fu = u - iu;
    let fv = v - iv;
    let i0 = iu as i64;
    let j0 = iv as i64;
    let mut out = [Tap {
        cell: 0,
        w: 0.0,
        dw_du: 0.0,
        dw_dv: 0.0,
    }; 4];
    let mut n = 0;
    let corners = [
        (i0, j0, (1.0 - fu) * (1.0 - fv), -(1.0 - fv), -(1.0 - fu)),
        (i0, j0 + 1, (1.0 - fu) * fv, -fv, 1.0 - fu),
        (i0 + 1, j0, fu * (1.0 - fv), 1.0 - fv, -fu),
        (i0 + 1, j0 + 1, fu * fv, fv, fu),
    ];
    for (i, j, wt, du, dv) in corners {
        if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
            out[n] = Tap {
                cell: i as usize * w + j as usize,
                w: wt,
                dw_du: du,
                dw_dv: dv,
            };
            n += 1;
        }
    }
    Some((out, n))
}

/// Samples `grid` (`[h, w, c]`) at `points` (`[p, 2]`) into `[p, c]`.
pub(crate) fn bilinear_forward(grid: &[f64], h: usize, w: usize, c: usize, points: &[f64]) -> Vec<f64> {
    let np = points.len() / 2;
    let mut out = vec![0.0; np * c];
    for p in 0..np {
        let dst = &mut out[p * c..(p + 1) * c];
        match taps(h, w, points[2 * p], points[2 * p + 1]) {
            Some((t, n)) => {
                for tap in &t[..n] {
                    let src = &grid[tap.cell * c..(tap.cell + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += tap.w * s;
                    }
                }
            }
            None => dst.fill(f64::NAN),
        }
    }
    out
}

/// Gradients of [`bilinear_forward`] with respect to the grid and the points.
pub(crate) fn bilinear_backward(
    grid: &[f64],
    h: usize,
    w: usize,
    c: usize,
    points: &[f64],
    g_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let np = points.len() / 2;
    let mut g_grid = vec![0.0; grid.len()];
    let mut g_pts = vec![0.0; points.len()];
    for p in 0..np {
        let g = &g_out[p * c..(p + 1) * c];
        let Some((t, n)) = taps(h, w, points[2 * p], points[2 * p + 1]) else {
            g_pts[2 * p] = f64::NAN;
            g_pts[2 * p + 1] = f64::NAN;
            continue;
        };
        let (mut gu, mut gv) = (0.0, 0.0);
        for tap in &t[..n] {
            let src = &grid[tap.cell * c..(tap.cell + 1) * c];
            let dst = &mut g_grid[tap.cell * c..(tap.cell + 1) * c];
            let mut dot = 0.0;
            for k in 0..c {
                dst[k] += tap.w * g[k];
                dot += g[k] * src[k];
            }
            gu += tap.dw_du * dot;
            gv += tap.dw_dv * dot;
        }
        g_pts[2 * p] = gu;
        g_pts[2 * p + 1] = gv;
    }
    (g_grid, g_pts)
}

/// Geometry of a multi-map deformable sampling call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DeformDims {
    pub queries: usize,
    pub heads: usize,
    pub maps: usize,
    pub points: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl DeformDims {
    fn head_dim(&self) -> usize {
        self.c / self.heads
    }
    fn loc_index(&self, q: usize, hd: usize, l: usize, p: usize) -> usize {
        (((q * self.heads + hd) * self.maps + l) * self.points + p) * 2
    }
    fn attn_index(&self, q: usize, hd: usize, l: usize, p: usize) -> usize {
        (q * self.heads + hd) * self.maps * self.points + l * self.points + p
    }
}

/// `out[q, hd*D..] = sum_{l,p} attn[q,hd,l,p] * sample(values[l], loc[q,hd,l,p])[hd*D..]`.
pub(crate) fn deform_forward(dims: DeformDims, values: &[&[f64]], loc: &[f64], attn: &[f64]) -> Vec<f64> {
    let d = dims.head_dim();
    let c = dims.c;
    let mut out = vec![0.0; dims.queries * c];
    for q in 0..dims.queries {
        for hd in 0..dims.heads {
            let dst = &mut out[q * c + hd * d..q * c + (hd + 1) * d];
            for (l, vmap) in values.iter().enumerate() {
                for p in 0..dims.points {
                    let li = dims.loc_index(q, hd, l, p);
                    let a = attn[dims.attn_index(q, hd, l, p)];
                    match taps(dims.h, dims.w, loc[li], loc[li + 1]) {
                        Some((t, n)) => {
                            for tap in &t[..n] {
                                let base = tap.cell * c + hd * d;
                                let wt = a * tap.w;
                                for k in 0..d {
                                    dst[k] += wt * vmap[base + k];
                                }
                            }
                        }
                        None => dst.fill(f64::NAN),
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`deform_forward`]: (per-map value grads, location grads, attention grads).
pub(crate) fn deform_backward(
    dims: DeformDims,
    values: &[&[f64]],
    loc: &[f64],
    attn: &[f64],
    g_out: &[f64],
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let d = dims.head_dim();
    let c = dims.c;
    let mut g_values: Vec<Vec<f64>> = values.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut g_loc = vec![0.0; loc.len()];
    let mut g_attn = vec![0.0; attn.len()];
    for q in 0..dims.queries {
        for hd in 0..dims.heads {
            let g = &g_out[q * c + hd * d..q * c + (hd + 1) * d];
            for (l, vmap) in values.iter().enumerate() {
                for p in 0..dims.points {
                    let li = dims.loc_index(q, hd, l, p);
                    let ai = dims.attn_index(q, hd, l, p);
                    let a = attn[ai];
                    let Some((t, n)) = taps(dims.h, dims.w, loc[li], loc[li + 1]) else {
                        g_loc[li] = f64::NAN;
                        g_loc[li + 1] = f64::NAN;
                        g_attn[ai] = f64::NAN;
                        continue;
                    };
                    let (mut ga, mut gu, mut gv) = (0.0, 0.0, 0.0);
                    for tap in &t[..n] {
                        let base = tap.cell * c + hd * d;
                        let mut dot = 0.0;
                        let gv_map = &mut g_values[l];
                        for k in 0..d {
                            dot += g[k] * vmap[base + k];
                            gv_map[base + k] += a * tap.w * g[k];
                        }
                        ga += tap.w * dot;
                        gu += tap.dw_du * dot;
                        gv += tap.dw_dv * dot;
                    }
                    g_attn[ai] = ga;
                    g_loc[li] = a * gu;
                    g_loc[li + 1] = a * gv;
                }
            }
        }
    }
    (g_values, g_loc, g_attn)
}

/// im2col for a stride-1, zero-padded ("same") `k x k` convolution over `[h, w, cin]`.
/// Output is `[h*w, k*k*cin]` with column index `(di*k + dj)*cin + c`.
pub(crate) fn im2col(x: &[f64], h: usize, w: usize, cin: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as i64;
    let kk = k * k * cin;
    let mut cols = Vec::with_capacity(h * w * kk);
    for i in 0..h {
        for j in 0..w {
            for di in 0..k {
                let si = i as i64 + di as i64 - pad;
                for dj in 0..k {
                    let sj = j as i64 + dj as i64 - pad;
                    if si < 0 || si >= h as i64 || sj < 0 || sj >= w as i64 {
                        cols.resize(cols.len() + cin, 0.0);
                    } else {
                        let src = (si as usize * w + sj as usize) * cin;
                        cols.extend_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    debug_assert_eq!(cols.len(), h * w * kk);
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(cols: &[f64], h: usize, w: usize, cin: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as i64;
    let kk = k * k * cin;
    let mut x = vec![0.0; h * w * cin];
    for i in 0..h {
        for j in 0..w {
            let row = &cols[(i * w + j) * kk..(i * w + j + 1) * kk];
            for di in 0..k {
                let si = i as i64 + di as i64 - pad;
                if si < 0 || si >= h as i64 {
                    continue;
                }
                for dj in 0..k {
                    let sj = j as i64 + dj as i64 - pad;
                    if sj < 0 || sj >= w as i64 {
                        continue;
                    }
                    let dst = (si as usize * w + sj as usize) * cin;
                    let src = (di * k + dj) * cin;
                    for c in 0..cin {
                        x[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Stable `(sigmoid(x), 1 - sigmoid(x))`.
pub(crate) fn sigmoid_pair(x: f64) -> (f64, f64) {
    if x >= 0.0 {
        let e = (-x).exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    } else {
        let e = x.exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    }
}

/// Penalty-reduced focal loss term for one logit and its soft target, plus
/// its derivative with respect to the logit.
pub(crate) fn focal_term(x: f64, t: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let (p, q) = sigmoid_pair(x);
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    if t >= 1.0 {
        let qa = q.powf(alpha);
        let loss = -qa * log_p;
        let grad = alpha * p * qa * log_p - qa * q;
        (loss, grad)
    } else {
        let neg = (1.0 - t).powf(beta);
        let pa = p.powf(alpha);
        let loss = -neg * pa * log_q;
        let grad = neg * (pa * p - alpha * pa * q * log_q);
        (loss, grad)
    }
}
