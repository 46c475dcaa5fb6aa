//! Forward and backward passes of the network's building blocks. All
//! activations are row-major `[rows, width]`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::linalg::{gemm, View};
use crate::math::{erf, exp, sqrt};
use crate::rng::Rng;

pub(crate) const LN_EPS: f64 = 1e-5;
const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / sqrt(var + LN_EPS);
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns `dx`; accumulates `dg`, `db`.
pub(crate) fn layer_norm_bwd(dy: &[f64], c: &LnCache, d: usize, g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &c.xhat[r * d..(r + 1) * d];
        let (mut s1, mut s2) = (0.0, 0.0);
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xh[j];
        }
        let (m1, m2) = (s1 / d as f64, s2 / d as f64);
        for j in 0..d {
            dx[r * d + j] = c.rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

/// `x [rows, i] @ w [i, o] + b`.
pub(crate) fn linear(x: &[f64], i: usize, w: &[f64], b: &[f64], o: usize) -> Vec<f64> {
    let rows = x.len() / i;
    let mut y = vec![0.0; rows * o];
    for r in 0..rows {
        y[r * o..(r + 1) * o].copy_from_slice(b);
    }
    gemm(1.0, View::new(x, rows, i, i), View::new(w, i, o, o), 1.0, &mut y, o);
    y
}

/// Accumulates `dw`, `db` and returns `dx`.
pub(crate) fn linear_bwd(
    dy: &[f64],
    x: &[f64],
    i: usize,
    w: &[f64],
    o: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let rows = dy.len() / o;
    gemm(1.0, View::new(x, rows, i, i).t(), View::new(dy, rows, o, o), 1.0, dw, o);
    for r in 0..rows {
        for (a, g) in db.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
            *a += g;
        }
    }
    let mut dx = vec![0.0; rows * i];
    gemm(1.0, View::new(dy, rows, o, o), View::new(w, i, o, o).t(), 0.0, &mut dx, i);
    dx
}

pub(crate) fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| 0.5 * v * (1.0 + erf(v * FRAC_1_SQRT_2))).collect()
}

pub(crate) fn gelu_bwd(dy: &[f64], x: &[f64]) -> Vec<f64> {
    dy.iter()
        .zip(x)
        .map(|(&g, &v)| {
            let cdf = 0.5 * (1.0 + erf(v * FRAC_1_SQRT_2));
            let pdf = FRAC_1_SQRT_2PI * exp(-0.5 * v * v);
            g * (cdf + v * pdf)
        })
        .collect()
}

/// Inverted dropout. Returns the per-element multipliers when active.
pub(crate) fn dropout(x: &mut [f64], p: f64, rng: Option<&mut Rng>) -> Option<Vec<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    for (v, m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

pub(crate) fn dropout_bwd(dy: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (g, k) in dy.iter_mut().zip(m) {
            *g *= k;
        }
    }
}

pub(crate) fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// In-place row softmax over `[rows, cols]`; `-inf` entries become 0.
pub(crate) fn softmax_rows(s: &mut [f64], cols: usize) {
    for row in s.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Shapes for multi-head attention over a padded batch.
#[derive(Clone, Copy)]
pub(crate) struct AttnShape {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub d: usize,
    pub heads: usize,
}

pub(crate) struct AttnParams<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
}

pub(crate) struct AttnCache {
    sh: AttnShape,
    xq: Vec<f64>,
    xkv: Option<Vec<f64>>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax probabilities `[batch, heads, tq, tk]`.
    p: Vec<f64>,
    drop: Option<Vec<f64>>,
    ctx: Vec<f64>,
}

/// Multi-head attention. `xkv = None` means self-attention on `xq`.
/// `key_pad[b * tk + j]` masks key `j` of sequence `b`; `causal` masks
/// keys after the query position.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention(
    sh: AttnShape,
    xq: &[f64],
    xkv: Option<&[f64]>,
    key_pad: &[bool],
    causal: bool,
    w: &AttnParams<'_>,
    attn_dropout: f64,
    rng: Option<&mut Rng>,
) -> (Vec<f64>, AttnCache) {
    let AttnShape { batch, tq, tk, d, heads } = sh;
    let dh = d / heads;
    let scale = 1.0 / sqrt(dh as f64);
    let src = xkv.unwrap_or(xq);
    let q = linear(xq, d, w.wq, w.bq, d);
    let k = linear(src, d, w.wk, w.bk, d);
    let v = linear(src, d, w.wv, w.bv, d);
    let mut p = vec![0.0; batch * heads * tq * tk];
    for b in 0..batch {
        for h in 0..heads {
            let s = &mut p[(b * heads + h) * tq * tk..(b * heads + h + 1) * tq * tk];
            gemm(
                scale,
                View::new(&q[b * tq * d + h * dh..], tq, dh, d),
                View::new(&k[b * tk * d + h * dh..], tk, dh, d).t(),
                0.0,
                s,
                tk,
            );
            for i in 0..tq {
                for j in 0..tk {
                    if key_pad[b * tk + j] || (causal && j > i) {
                        s[i * tk + j] = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows(s, tk);
        }
    }
    let mut pd = p.clone();
    let drop = dropout(&mut pd, attn_dropout, rng);
    let mut ctx = vec![0.0; batch * tq * d];
    for b in 0..batch {
        for h in 0..heads {
            let off = (b * heads + h) * tq * tk;
            gemm(
                1.0,
                View::new(&pd[off..off + tq * tk], tq, tk, tk),
                View::new(&v[b * tk * d + h * dh..], tk, dh, d),
                0.0,
                &mut ctx[b * tq * d + h * dh..],
                d,
            );
        }
    }
    let out = linear(&ctx, d, w.wo, w.bo, d);
    let cache = AttnCache { sh, xq: xq.to_vec(), xkv: xkv.map(<[f64]>::to_vec), q, k, v, p, drop, ctx };
    (out, cache)
}

pub(crate) struct AttnGrads<'a> {
    pub wq: &'a mut [f64],
    pub bq: &'a mut [f64],
    pub wk: &'a mut [f64],
    pub bk: &'a mut [f64],
    pub wv: &'a mut [f64],
    pub bv: &'a mut [f64],
    pub wo: &'a mut [f64],
    pub bo: &'a mut [f64],
}

/// Returns `(dxq, dxkv)`; for self-attention the second is folded into the
/// first and returned empty.
pub(crate) fn attention_bwd(dout: &[f64], c: &AttnCache, w: &AttnParams<'_>, g: AttnGrads<'_>) -> (Vec<f64>, Vec<f64>) {
    let AttnShape { batch, tq, tk, d, heads } = c.sh;
    let dh = d / heads;
    let scale = 1.0 / sqrt(dh as f64);
    let dctx = linear_bwd(dout, &c.ctx, d, w.wo, d, g.wo, g.bo);
    let mut dq = vec![0.0; batch * tq * d];
    let mut dk = vec![0.0; batch * tk * d];
    let mut dv = vec![0.0; batch * tk * d];
    let pd_full: Vec<f64> = match &c.drop {
        Some(m) => c.p.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => Vec::new(),
    };
    let mut dp = vec![0.0; tq * tk];
    for b in 0..batch {
        for h in 0..heads {
            let off = (b * heads + h) * tq * tk;
            let p = &c.p[off..off + tq * tk];
            let pd = if c.drop.is_some() { &pd_full[off..off + tq * tk] } else { p };
            let dctx_bh = View::new(&dctx[b * tq * d + h * dh..], tq, dh, d);
            // dV = Pdᵀ dctx
            gemm(1.0, View::new(pd, tq, tk, tk).t(), dctx_bh, 1.0, &mut dv[b * tk * d + h * dh..], d);
            // dPd = dctx Vᵀ
            gemm(1.0, dctx_bh, View::new(&c.v[b * tk * d + h * dh..], tk, dh, d).t(), 0.0, &mut dp, tk);
            if let Some(m) = &c.drop {
                for (x, k) in dp.iter_mut().zip(&m[off..off + tq * tk]) {
                    *x *= k;
                }
            }
            for i in 0..tq {
                let pr = &p[i * tk..(i + 1) * tk];
                let dr = &mut dp[i * tk..(i + 1) * tk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot);
                }
            }
            gemm(scale, View::new(&dp, tq, tk, tk), View::new(&c.k[b * tk * d + h * dh..], tk, dh, d), 1.0, &mut dq[b * tq * d + h * dh..], d);
            gemm(scale, View::new(&dp, tq, tk, tk).t(), View::new(&c.q[b * tq * d + h * dh..], tq, dh, d), 1.0, &mut dk[b * tk * d + h * dh..], d);
        }
    }
    let src = c.xkv.as_deref().unwrap_or(&c.xq);
    let mut dxq = linear_bwd(&dq, &c.xq, d, w.wq, d, g.wq, g.bq);
    let mut dxkv = linear_bwd(&dk, src, d, w.wk, d, g.wk, g.bk);
    add_into(&mut dxkv, &linear_bwd(&dv, src, d, w.wv, d, g.wv, g.bv));
    if c.xkv.is_none() {
        add_into(&mut dxq, &dxkv);
        dxkv.clear();
    }
    (dxq, dxkv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn layer_norm_gradient() {
        let d = 4;
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let g = [1.0, 0.5, -0.3, 2.0];
        let b = [0.1, 0.0, 0.2, -0.1];
        let w: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let f = |x: &[f64]| layer_norm(x, d, &g, &b).0.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
        let (_, c) = layer_norm(&x, d, &g, &b);
        let (mut dg, mut db) = ([0.0; 4], [0.0; 4]);
        let dx = layer_norm_bwd(&w, &c, d, &g, &mut dg, &mut db);
        for (a, e) in dx.iter().zip(fd(f, &x)) {
            assert!((a - e).abs() < 1e-7);
        }
    }

    #[test]
    fn gelu_gradient() {
        let x = [-2.0, -0.5, 0.0, 0.3, 1.7];
        let dy = [1.0; 5];
        let g = gelu_bwd(&dy, &x);
        for i in 0..5 {
            let e = fd(|v: &[f64]| gelu(v)[i], &x)[i];
            assert!((g[i] - e).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_masks_infinite() {
        let mut s = [0.0, f64::NEG_INFINITY, 0.0];
        softmax_rows(&mut s, 3);
        assert_eq!(s, [0.5, 0.0, 0.5]);
    }
}
