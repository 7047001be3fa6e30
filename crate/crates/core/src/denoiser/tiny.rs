//! A small bidirectional transformer denoiser with hand-written backprop.
//!
//! Pre-LN blocks: `x += Attn(LN1(x)); x += FFN(LN2(x))`, GELU (tanh form) in
//! the feed-forward, a final LayerNorm and an untied output projection. No
//! timestep input. The `<mask>` logit is excluded from the softmax so the
//! model never predicts a mask as clean data.
//!
//! Parameters live in one flat `Vec<f64>` in declared order:
//! token embedding, position embedding, then per layer
//! `ln1.{g,b} qkv.{w,b} proj.{w,b} ln2.{g,b} fc.{w,b} fc2.{w,b}`,
//! then `lnf.{g,b} out.{w,b}`. Matrices are stored `(in, out)` row-major.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, MASK};
use crate::diffusion::NoisyState;
use crate::{Error, Result};

use super::{Denoiser, LogitGrid, LOG_ZERO};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Longest layout (condition + separator + target) accepted.
    pub max_len: usize,
}

impl Architecture {
    /// 2 layers, 64-wide, 4 heads, 128-wide feed-forward.
    pub fn desk(vocab_size: usize, max_len: usize) -> Self {
        Architecture {
            vocab_size,
            embed_dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Architecture {
            vocab_size,
            embed_dim,
            layers,
            heads,
            ff_dim,
            max_len,
        } = *self;
        if vocab_size <= MASK as usize + 1 || embed_dim == 0 || layers == 0 || heads == 0 || ff_dim == 0 || max_len < 2 {
            return Err(Error::contract(format!("degenerate architecture {self:?}")));
        }
        if embed_dim % heads != 0 {
            return Err(Error::contract(format!(
                "embed_dim {embed_dim} not divisible by heads {heads}"
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Offsets::new(self).total
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    out_w: usize,
    out_b: usize,
    total: usize,
}

impl Offsets {
    fn new(a: &Architecture) -> Self {
        let (v, d, f) = (a.vocab_size, a.embed_dim, a.ff_dim);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok = take(v * d);
        let pos = take(a.max_len * d);
        let layers = (0..a.layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                qkv_w: take(d * 3 * d),
                qkv_b: take(3 * d),
                proj_w: take(d * d),
                proj_b: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                fc_w: take(d * f),
                fc_b: take(f),
                fc2_w: take(f * d),
                fc2_b: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let out_w = take(d * v);
        let out_b = take(v);
        Offsets {
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
            total: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDenoiser {
    arch: Architecture,
    params: Vec<f64>,
}

impl TinyDenoiser {
    /// Weights `N(0, 1/fan_in)`, biases 0, LayerNorm gains 1. Embedding
    /// tables use the model width as fan-in.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let off = Offsets::new(&arch);
        let (v, d, f) = (arch.vocab_size, arch.embed_dim, arch.ff_dim);
        let mut params = vec![0.0; off.total];
        let mut fill = |start: usize, len: usize, fan_in: usize, rng: &mut R| {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
            for p in &mut params[start..start + len] {
                *p = normal.sample(rng);
            }
        };
        fill(off.tok, v * d, d, rng);
        fill(off.pos, arch.max_len * d, d, rng);
        for l in &off.layers {
            fill(l.qkv_w, d * 3 * d, d, rng);
            fill(l.proj_w, d * d, d, rng);
            fill(l.fc_w, d * f, d, rng);
            fill(l.fc2_w, f * d, f, rng);
        }
        fill(off.out_w, d * v, d, rng);
        for l in &off.layers {
            params[l.ln1_g..l.ln1_g + d].fill(1.0);
            params[l.ln2_g..l.ln2_g + d].fill(1.0);
        }
        params[off.lnf_g..off.lnf_g + d].fill(1.0);
        Ok(TinyDenoiser { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::shape(arch.param_count(), params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::contract("non-finite parameter"));
        }
        Ok(TinyDenoiser { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, tokens: &[TokenId], condition_len: usize) -> Result<()> {
        if tokens.len() > self.arch.max_len {
            return Err(Error::TooLong {
                what: "layout",
                len: tokens.len(),
                max: self.arch.max_len,
            });
        }
        if condition_len >= tokens.len() {
            return Err(Error::contract("layout has no target region"));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.arch.vocab_size) {
            return Err(Error::contract(format!("token {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Log-probabilities for the target rows of `tokens`.
    pub fn tiny_forward(&self, tokens: &[TokenId], condition_len: usize) -> Result<LogitGrid> {
        self.check_input(tokens, condition_len)?;
        let cache = self.forward_cached(tokens, condition_len);
        let rows = tokens.len() - condition_len;
        if cache.logp.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: 0,
                msg: "non-finite activations in forward pass".into(),
            });
        }
        LogitGrid::from_log_probs(rows, self.arch.vocab_size, cache.logp)
    }

    /// Weighted cross-entropy `sum_j w_j * -log p(target_j)` over target rows,
    /// adding its gradient into `grad`. Rows with zero weight contribute
    /// nothing.
    pub fn loss_and_grad(
        &self,
        tokens: &[TokenId],
        condition_len: usize,
        clean_target: &[TokenId],
        row_weights: &[f64],
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_input(tokens, condition_len)?;
        let rows = tokens.len() - condition_len;
        if clean_target.len() != rows || row_weights.len() != rows {
            return Err(Error::shape(rows, clean_target.len().min(row_weights.len())));
        }
        if grad.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), grad.len()));
        }
        let cache = self.forward_cached(tokens, condition_len);
        let v = self.arch.vocab_size;
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; rows * v];
        for j in 0..rows {
            let w = row_weights[j];
            if w == 0.0 {
                continue;
            }
            let y = clean_target[j] as usize;
            if y == MASK as usize {
                return Err(Error::contract("clean target contains <mask>"));
            }
            let lp = &cache.logp[j * v..(j + 1) * v];
            loss += -w * lp[y];
            let dl = &mut dlogits[j * v..(j + 1) * v];
            for k in 0..v {
                if k != MASK as usize {
                    dl[k] = w * lp[k].exp();
                }
            }
            dl[y] -= w;
        }
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: 0,
                msg: "non-finite loss".into(),
            });
        }
        self.backward(&cache, &dlogits, grad);
        Ok(loss)
    }

    fn forward_cached(&self, tokens: &[TokenId], condition_len: usize) -> Cache {
        let a = &self.arch;
        let off = Offsets::new(a);
        let p = &self.params;
        let (n, d, f, v) = (tokens.len(), a.embed_dim, a.ff_dim, a.vocab_size);
        let rows = n - condition_len;

        let mut x = vec![0.0; n * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let te = &p[off.tok + tok as usize * d..][..d];
            let pe = &p[off.pos + i * d..][..d];
            for k in 0..d {
                x[i * d + k] = te[k] + pe[k];
            }
        }

        let mut layers = Vec::with_capacity(a.layers);
        for lo in &off.layers {
            let x_in = x.clone();
            let (a1, ln1) = layer_norm(&x_in, n, d, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d]);
            let qkv = linear(&a1, n, d, 3 * d, &p[lo.qkv_w..][..3 * d * d], &p[lo.qkv_b..][..3 * d]);
            let (att, ctx) = attention(&qkv, n, d, a.heads);
            let proj = linear(&ctx, n, d, d, &p[lo.proj_w..][..d * d], &p[lo.proj_b..][..d]);
            let x_mid: Vec<f64> = x_in.iter().zip(&proj).map(|(a, b)| a + b).collect();
            let (b1, ln2) = layer_norm(&x_mid, n, d, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d]);
            let hpre = linear(&b1, n, d, f, &p[lo.fc_w..][..d * f], &p[lo.fc_b..][..f]);
            let hact: Vec<f64> = hpre.iter().map(|&z| gelu(z)).collect();
            let out = linear(&hact, n, f, d, &p[lo.fc2_w..][..f * d], &p[lo.fc2_b..][..d]);
            x = x_mid.iter().zip(&out).map(|(a, b)| a + b).collect();
            layers.push(LayerCache {
                a1,
                ln1,
                qkv,
                att,
                ctx,
                b1,
                ln2,
                hpre,
                hact,
            });
        }

        let x_tgt = &x[condition_len * d..];
        let (z, lnf) = layer_norm(x_tgt, rows, d, &p[off.lnf_g..][..d], &p[off.lnf_b..][..d]);
        let mut logp = linear(&z, rows, d, v, &p[off.out_w..][..d * v], &p[off.out_b..][..v]);
        for row in logp.chunks_mut(v) {
            row[MASK as usize] = f64::NEG_INFINITY;
            let lse = super::log_sum_exp(row);
            for val in row.iter_mut() {
                *val -= lse;
            }
            row[MASK as usize] = LOG_ZERO;
        }
        Cache {
            tokens: tokens.to_vec(),
            condition_len,
            layers,
            lnf,
            z,
            logp,
        }
    }

    fn backward(&self, cache: &Cache, dlogits: &[f64], grad: &mut [f64]) {
        let a = &self.arch;
        let off = Offsets::new(a);
        let p = &self.params;
        let n = cache.tokens.len();
        let c = cache.condition_len;
        let rows = n - c;
        let (d, f, v) = (a.embed_dim, a.ff_dim, a.vocab_size);

        // Output projection and final LayerNorm (target rows only).
        let mut dz = vec![0.0; rows * d];
        linear_backward(
            dlogits,
            &cache.z,
            rows,
            d,
            v,
            &p[off.out_w..][..d * v],
            &mut dz,
            grad,
            off.out_w,
            off.out_b,
        );
        let mut dx = vec![0.0; n * d];
        layer_norm_backward(
            &dz,
            &cache.lnf,
            rows,
            d,
            &p[off.lnf_g..][..d],
            &mut dx[c * d..],
            grad,
            off.lnf_g,
            off.lnf_b,
        );

        for (lo, lc) in off.layers.iter().zip(&cache.layers).rev() {
            // x_out = x_mid + FFN(LN2(x_mid))
            let mut dhact = vec![0.0; n * f];
            linear_backward(
                &dx,
                &lc.hact,
                n,
                f,
                d,
                &p[lo.fc2_w..][..f * d],
                &mut dhact,
                grad,
                lo.fc2_w,
                lo.fc2_b,
            );
            let dhpre: Vec<f64> = dhact
                .iter()
                .zip(&lc.hpre)
                .map(|(g, &z)| g * gelu_grad(z))
                .collect();
            let mut db1 = vec![0.0; n * d];
            linear_backward(
                &dhpre,
                &lc.b1,
                n,
                d,
                f,
                &p[lo.fc_w..][..d * f],
                &mut db1,
                grad,
                lo.fc_w,
                lo.fc_b,
            );
            // dx now holds d(x_mid) from the residual path; add the LN2 branch.
            layer_norm_backward(
                &db1,
                &lc.ln2,
                n,
                d,
                &p[lo.ln2_g..][..d],
                &mut dx,
                grad,
                lo.ln2_g,
                lo.ln2_b,
            );

            // x_mid = x_in + Proj(Attn(LN1(x_in)))
            let mut dctx = vec![0.0; n * d];
            linear_backward(
                &dx,
                &lc.ctx,
                n,
                d,
                d,
                &p[lo.proj_w..][..d * d],
                &mut dctx,
                grad,
                lo.proj_w,
                lo.proj_b,
            );
            let dqkv = attention_backward(&dctx, &lc.qkv, &lc.att, n, d, a.heads);
            let mut da1 = vec![0.0; n * d];
            linear_backward(
                &dqkv,
                &lc.a1,
                n,
                d,
                3 * d,
                &p[lo.qkv_w..][..3 * d * d],
                &mut da1,
                grad,
                lo.qkv_w,
                lo.qkv_b,
            );
            layer_norm_backward(
                &da1,
                &lc.ln1,
                n,
                d,
                &p[lo.ln1_g..][..d],
                &mut dx,
                grad,
                lo.ln1_g,
                lo.ln1_b,
            );
        }

        for (i, &tok) in cache.tokens.iter().enumerate() {
            let dxi = &dx[i * d..(i + 1) * d];
            let te = off.tok + tok as usize * d;
            let pe = off.pos + i * d;
            for k in 0..d {
                grad[te + k] += dxi[k];
                grad[pe + k] += dxi[k];
            }
        }
    }
}

impl Denoiser for TinyDenoiser {
    fn vocab_size(&self) -> usize {
        self.arch.vocab_size
    }

    fn predict(&self, state: &NoisyState) -> Result<LogitGrid> {
        self.tiny_forward(state.tokens(), state.condition_len())
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    a1: Vec<f64>,
    ln1: LnCache,
    qkv: Vec<f64>,
    att: Vec<f64>,
    ctx: Vec<f64>,
    b1: Vec<f64>,
    ln2: LnCache,
    hpre: Vec<f64>,
    hact: Vec<f64>,
}

struct Cache {
    tokens: Vec<TokenId>,
    condition_len: usize,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    z: Vec<f64>,
    logp: Vec<f64>,
}

fn layer_norm(x: &[f64], n: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for k in 0..d {
            let h = (row[k] - mean) * r;
            xhat[i * d + k] = h;
            y[i * d + k] = h * g[k] + b[k];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Adds `dL/dx` into `dx` and parameter gradients into `grad`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    n: usize,
    d: usize,
    g: &[f64],
    dx: &mut [f64],
    grad: &mut [f64],
    g_off: usize,
    b_off: usize,
) {
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for k in 0..d {
            grad[g_off + k] += dyr[k] * xh[k];
            grad[b_off + k] += dyr[k];
            dxhat[k] = dyr[k] * g[k];
            mean_dxhat += dxhat[k];
            mean_dxhat_xhat += dxhat[k] * xh[k];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = cache.rstd[i];
        for k in 0..d {
            dx[i * d + k] += r * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xhat);
        }
    }
}

/// `y = x W + b` with `x: (n, k)`, `W: (k, m)`.
fn linear(x: &[f64], n: usize, k: usize, m: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n * m];
    for i in 0..n {
        let yr = &mut y[i * m..(i + 1) * m];
        yr.copy_from_slice(b);
        for (kk, &xv) in x[i * k..(i + 1) * k].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[kk * m..(kk + 1) * m];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn linear_backward(
    dy: &[f64],
    x: &[f64],
    n: usize,
    k: usize,
    m: usize,
    w: &[f64],
    dx: &mut [f64],
    grad: &mut [f64],
    w_off: usize,
    b_off: usize,
) {
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        if dyr.iter().all(|&g| g == 0.0) {
            continue;
        }
        for (gb, &g) in grad[b_off..b_off + m].iter_mut().zip(dyr) {
            *gb += g;
        }
        let xr = &x[i * k..(i + 1) * k];
        for kk in 0..k {
            let wr = &w[kk * m..(kk + 1) * m];
            let mut acc = 0.0;
            for (&wv, &g) in wr.iter().zip(dyr) {
                acc += wv * g;
            }
            dx[i * k + kk] += acc;
            let xv = xr[kk];
            if xv != 0.0 {
                let gw = &mut grad[w_off + kk * m..w_off + (kk + 1) * m];
                for (gv, &g) in gw.iter_mut().zip(dyr) {
                    *gv += xv * g;
                }
            }
        }
    }
}

/// Bidirectional multi-head attention. Returns the per-head probability
/// matrices `(heads, n, n)` and the concatenated context `(n, d)`.
fn attention(qkv: &[f64], n: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut att = vec![0.0; heads * n * n];
    let mut ctx = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let q = &qkv[i * 3 * d + h * dh..][..dh];
            let row = &mut att[(h * n + i) * n..][..n];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in row.iter_mut().enumerate() {
                let k = &qkv[j * 3 * d + d + h * dh..][..dh];
                *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*s);
            }
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            for s in row.iter_mut() {
                *s /= z;
            }
            let out = &mut ctx[i * d + h * dh..][..dh];
            for (j, &pj) in row.iter().enumerate() {
                let vv = &qkv[j * 3 * d + 2 * d + h * dh..][..dh];
                for (o, &x) in out.iter_mut().zip(vv) {
                    *o += pj * x;
                }
            }
        }
    }
    (att, ctx)
}

fn attention_backward(dctx: &[f64], qkv: &[f64], att: &[f64], n: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; n * 3 * d];
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        for i in 0..n {
            let dout = &dctx[i * d + h * dh..][..dh];
            let prow = &att[(h * n + i) * n..][..n];
            let mut dot = 0.0;
            for j in 0..n {
                let vv = &qkv[j * 3 * d + 2 * d + h * dh..][..dh];
                dp[j] = dout.iter().zip(vv).map(|(a, b)| a * b).sum();
                dot += prow[j] * dp[j];
                let dv = &mut dqkv[j * 3 * d + 2 * d + h * dh..][..dh];
                for (g, &o) in dv.iter_mut().zip(dout) {
                    *g += prow[j] * o;
                }
            }
            for j in 0..n {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for kk in 0..dh {
                    let kj = qkv[j * 3 * d + d + h * dh + kk];
                    let qi = qkv[i * 3 * d + h * dh + kk];
                    dqkv[i * 3 * d + h * dh + kk] += ds * kj;
                    dqkv[j * 3 * d + d + h * dh + kk] += ds * qi;
                }
            }
        }
    }
    dqkv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
