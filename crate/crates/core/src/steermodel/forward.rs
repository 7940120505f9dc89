// SPDX-License-Identifier: MIT OR Apache-2.0

//! Batched forward pass, its backward pass, and sequence scoring.

use super::ops::{self, gemm, gelu, gelu_grad, rmsnorm, rmsnorm_backward, rope_row};
use super::{check_tokens, ModelWeights, SteerSpec};
use crate::error::{Error, Result};

/// Residual-stream states: `layers[l]` is `seq_len × d_model`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub layers: Vec<Vec<f64>>,
    pub seq_len: usize,
    pub d_model: usize,
}

impl HiddenTrace {
    pub fn at(&self, layer: usize, pos: usize) -> &[f64] {
        &self.layers[layer][pos * self.d_model..(pos + 1) * self.d_model]
    }
}

struct LayerCache {
    h1: Vec<f64>,
    xn1: Vec<f64>,
    r1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    h2: Vec<f64>,
    xn2: Vec<f64>,
    r2: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    hf: Vec<f64>,
    xnf: Vec<f64>,
    rf: Vec<f64>,
}

struct Pass {
    logits: Vec<f64>,
    trace: Option<Vec<Vec<f64>>>,
    cache: Option<Cache>,
}

/// Causal multi-head attention over `batch` sequences of length `seq`, each
/// query seeing at most `window` positions ending at itself.
#[allow(clippy::too_many_arguments)]
fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    seq: usize,
    n_heads: usize,
    head_dim: usize,
    window: usize,
    mut probs: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    let d = n_heads * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut ctx = vec![0.0; batch * seq * d];
    let mut p = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..n_heads {
            let off = h * head_dim;
            for i in 0..seq {
                let lo = (i + 1).saturating_sub(window);
                let qi = &q[(b * seq + i) * d + off..][..head_dim];
                for j in lo..=i {
                    let kj = &k[(b * seq + j) * d + off..][..head_dim];
                    p[j] = ops::dot(qi, kj) * scale;
                }
                ops::softmax_in_place(&mut p[lo..=i]);
                let ci = &mut ctx[(b * seq + i) * d + off..][..head_dim];
                for j in lo..=i {
                    let vj = &v[(b * seq + j) * d + off..][..head_dim];
                    for (c, x) in ci.iter_mut().zip(vj) {
                        *c += p[j] * x;
                    }
                }
                if let Some(pr) = probs.as_deref_mut() {
                    let row = &mut pr[((b * n_heads + h) * seq + i) * seq..][..seq];
                    row[lo..=i].copy_from_slice(&p[lo..=i]);
                }
            }
        }
    }
    ctx
}

fn run(
    w: &ModelWeights,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    steer: Option<&SteerSpec>,
    keep_cache: bool,
    keep_trace: bool,
) -> Pass {
    let c = &w.config;
    let (d, f, vsz, hd) = (c.d_model, c.d_ff, c.vocab_size, c.head_dim());
    let n = batch * seq;
    let emb_scale = (d as f64).sqrt();
    let mut x = vec![0.0; n * d];
    for (row, &t) in x.chunks_exact_mut(d).zip(tokens) {
        let e = &w.tok_emb[t as usize * d..][..d];
        for (o, v) in row.iter_mut().zip(e) {
            *o = v * emb_scale;
        }
    }
    let inject = |layer: usize, x: &mut Vec<f64>| {
        if let Some(s) = steer {
            if s.layer == layer {
                s.apply(x);
            }
        }
    };
    inject(0, &mut x);
    let mut trace = keep_trace.then(|| vec![x.clone()]);
    let mut caches = Vec::new();
    for (li, lw) in w.layers.iter().enumerate() {
        let (h1, xn1, r1) = rmsnorm(&x, &lw.attn_norm, d);
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        gemm(n, d, d, &h1, false, &lw.wq, false, &mut q, false);
        gemm(n, d, d, &h1, false, &lw.wk, false, &mut k, false);
        gemm(n, d, d, &h1, false, &lw.wv, false, &mut v, false);
        for (r, (qr, kr)) in q.chunks_exact_mut(d).zip(k.chunks_exact_mut(d)).enumerate() {
            rope_row(qr, r % seq, hd, 1.0);
            rope_row(kr, r % seq, hd, 1.0);
        }
        let mut probs = if keep_cache { vec![0.0; batch * c.n_heads * seq * seq] } else { Vec::new() };
        let ctx = attention(
            &q,
            &k,
            &v,
            batch,
            seq,
            c.n_heads,
            hd,
            c.context_len,
            keep_cache.then_some(&mut probs),
        );
        let mut x_mid = x.clone();
        gemm(n, d, d, &ctx, false, &lw.wo, false, &mut x_mid, true);
        let (h2, xn2, r2) = rmsnorm(&x_mid, &lw.mlp_norm, d);
        let mut u = vec![0.0; n * f];
        gemm(n, d, f, &h2, false, &lw.w1, false, &mut u, false);
        let act: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let mut x_out = x_mid;
        gemm(n, f, d, &act, false, &lw.w2, false, &mut x_out, true);
        inject(li + 1, &mut x_out);
        if let Some(t) = trace.as_mut() {
            t.push(x_out.clone());
        }
        x = x_out;
        if keep_cache {
            caches.push(LayerCache { h1, xn1, r1, q, k, v, probs, ctx, h2, xn2, r2, u, act });
        }
    }
    let (hf, xnf, rf) = rmsnorm(&x, &w.final_norm, d);
    let mut logits = vec![0.0; n * vsz];
    gemm(n, d, vsz, &hf, false, &w.tok_emb, true, &mut logits, false);
    Pass {
        logits,
        trace,
        cache: keep_cache.then_some(Cache { layers: caches, hf, xnf, rf }),
    }
}

/// Forward one sequence. Returns `seq_len × vocab_size` logits and the trace.
pub fn forward(w: &ModelWeights, tokens: &[u32], steer: Option<&SteerSpec>) -> Result<(Vec<f64>, HiddenTrace)> {
    check_tokens(&w.config, tokens)?;
    if tokens.is_empty() {
        return Err(Error::invalid("forward needs at least one token"));
    }
    if tokens.len() > w.config.context_len {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds context_len {}",
            tokens.len(),
            w.config.context_len
        )));
    }
    if let Some(s) = steer {
        s.check(&w.config)?;
    }
    let pass = run(w, tokens, 1, tokens.len(), steer, false, true);
    let trace = HiddenTrace {
        layers: pass.trace.expect("trace requested"),
        seq_len: tokens.len(),
        d_model: w.config.d_model,
    };
    Ok((pass.logits, trace))
}

/// Unsteered scoring of one sequence of any length.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    /// `nll[t - 1]` is the negative log-likelihood of `tokens[t]`, `t ≥ 1`.
    pub nll: Vec<f64>,
    /// Residual stream at the requested layer, `seq_len × d_model`.
    pub hidden: Option<Vec<f64>>,
    /// Set when the sequence is longer than the context window.
    pub truncated: bool,
}

impl Scored {
    /// Mean NLL of tokens at positions `from..` (`from ≥ 1`).
    pub fn mean_nll_from(&self, from: usize) -> f64 {
        let tail = &self.nll[from.max(1) - 1..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Score a sequence with the sliding-window context used by generation.
pub fn score(w: &ModelWeights, tokens: &[u32], hidden_layer: Option<usize>) -> Result<Scored> {
    check_tokens(&w.config, tokens)?;
    if tokens.len() < 2 {
        return Err(Error::invalid("scoring needs at least two tokens"));
    }
    if let Some(l) = hidden_layer {
        if l > w.config.n_layers {
            return Err(Error::invalid(format!("hidden layer {l} > n_layers")));
        }
    }
    let v = w.config.vocab_size;
    let pass = run(w, tokens, 1, tokens.len(), None, false, hidden_layer.is_some());
    let nll = (1..tokens.len())
        .map(|t| {
            let row = &pass.logits[(t - 1) * v..t * v];
            ops::log_sum_exp(row) - row[tokens[t] as usize]
        })
        .collect();
    let hidden = hidden_layer.map(|l| pass.trace.expect("trace requested").swap_remove(l));
    Ok(Scored {
        nll,
        hidden,
        truncated: tokens.len() > w.config.context_len,
    })
}

/// Mean next-token cross-entropy over `batch × seq` targets and its gradient.
pub fn loss_and_grad(
    w: &ModelWeights,
    inputs: &[u32],
    targets: &[u32],
    batch: usize,
    seq: usize,
) -> (f64, ModelWeights) {
    let c = &w.config;
    let (d, f, vsz, hd, nh) = (c.d_model, c.d_ff, c.vocab_size, c.head_dim(), c.n_heads);
    let n = batch * seq;
    assert_eq!(inputs.len(), n);
    assert_eq!(targets.len(), n);
    let pass = run(w, inputs, batch, seq, None, true, false);
    let cache = pass.cache.expect("cache requested");
    let mut logits = pass.logits;
    let mut loss = 0.0;
    for (row, &t) in logits.chunks_exact_mut(vsz).zip(targets) {
        let logit = row[t as usize];
        loss += ops::softmax_in_place(row) - logit;
        // row now holds probabilities; the gradient is p - onehot.
        row[t as usize] -= 1.0;
        row.iter_mut().for_each(|x| *x /= n as f64);
    }
    let loss = loss / n as f64;
    let mut g = w.zeros_like();

    gemm(vsz, n, d, &logits, true, &cache.hf, false, &mut g.tok_emb, true);
    let mut dhf = vec![0.0; n * d];
    gemm(n, vsz, d, &logits, false, &w.tok_emb, false, &mut dhf, false);
    let mut dx = rmsnorm_backward(&dhf, &cache.xnf, &cache.rf, &w.final_norm, &mut g.final_norm, d);

    let scale = 1.0 / (hd as f64).sqrt();
    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let lw = &w.layers[li];
        let gl = &mut g.layers[li];
        // MLP
        gemm(f, n, d, &lc.act, true, &dx, false, &mut gl.w2, true);
        let mut du = vec![0.0; n * f];
        gemm(n, d, f, &dx, false, &lw.w2, true, &mut du, false);
        du.iter_mut().zip(&lc.u).for_each(|(g, &u)| *g *= gelu_grad(u));
        gemm(d, n, f, &lc.h2, true, &du, false, &mut gl.w1, true);
        let mut dh2 = vec![0.0; n * d];
        gemm(n, f, d, &du, false, &lw.w1, true, &mut dh2, false);
        let dmid = rmsnorm_backward(&dh2, &lc.xn2, &lc.r2, &lw.mlp_norm, &mut gl.mlp_norm, d);
        dx.iter_mut().zip(&dmid).for_each(|(a, b)| *a += b);
        // attention output projection
        gemm(d, n, d, &lc.ctx, true, &dx, false, &mut gl.wo, true);
        let mut dctx = vec![0.0; n * d];
        gemm(n, d, d, &dx, false, &lw.wo, true, &mut dctx, false);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..nh {
                let off = h * hd;
                for i in 0..seq {
                    let lo = (i + 1).saturating_sub(c.context_len);
                    let prow = &lc.probs[((b * nh + h) * seq + i) * seq..][..seq];
                    let dci = &dctx[(b * seq + i) * d + off..][..hd];
                    let mut sum = 0.0;
                    for j in lo..=i {
                        let vj = &lc.v[(b * seq + j) * d + off..][..hd];
                        dp[j] = ops::dot(dci, vj);
                        sum += prow[j] * dp[j];
                        let dvj = &mut dv[(b * seq + j) * d + off..][..hd];
                        for (a, &x) in dvj.iter_mut().zip(dci) {
                            *a += prow[j] * x;
                        }
                    }
                    let qi = &lc.q[(b * seq + i) * d + off..][..hd];
                    for j in lo..=i {
                        let ds = prow[j] * (dp[j] - sum) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &lc.k[(b * seq + j) * d + off..][..hd];
                        let dqi = &mut dq[(b * seq + i) * d + off..][..hd];
                        for (a, &x) in dqi.iter_mut().zip(kj) {
                            *a += ds * x;
                        }
                        let dkj = &mut dk[(b * seq + j) * d + off..][..hd];
                        for (a, &x) in dkj.iter_mut().zip(qi) {
                            *a += ds * x;
                        }
                    }
                }
            }
        }
        for (r, (qr, kr)) in dq.chunks_exact_mut(d).zip(dk.chunks_exact_mut(d)).enumerate() {
            rope_row(qr, r % seq, hd, -1.0);
            rope_row(kr, r % seq, hd, -1.0);
        }
        gemm(d, n, d, &lc.h1, true, &dq, false, &mut gl.wq, true);
        gemm(d, n, d, &lc.h1, true, &dk, false, &mut gl.wk, true);
        gemm(d, n, d, &lc.h1, true, &dv, false, &mut gl.wv, true);
        let mut dh1 = vec![0.0; n * d];
        gemm(n, d, d, &dq, false, &lw.wq, true, &mut dh1, false);
        gemm(n, d, d, &dk, false, &lw.wk, true, &mut dh1, true);
        gemm(n, d, d, &dv, false, &lw.wv, true, &mut dh1, true);
        let din = rmsnorm_backward(&dh1, &lc.xn1, &lc.r1, &lw.attn_norm, &mut gl.attn_norm, d);
        dx.iter_mut().zip(&din).for_each(|(a, b)| *a += b);
    }
    let emb_scale = (d as f64).sqrt();
    for (row, &t) in dx.chunks_exact(d).zip(inputs) {
        let ge = &mut g.tok_emb[t as usize * d..][..d];
        for (a, &x) in ge.iter_mut().zip(row) {
            *a += x * emb_scale;
        }
    }
    (loss, g)
}

/// Loss only, for finite-difference checks and validation.
pub fn loss_only(w: &ModelWeights, inputs: &[u32], targets: &[u32], batch: usize, seq: usize) -> f64 {
    let v = w.config.vocab_size;
    let pass = run(w, inputs, batch, seq, None, false, false);
    let total: f64 = pass
        .logits
        .chunks_exact(v)
        .zip(targets)
        .map(|(row, &t)| ops::log_sum_exp(row) - row[t as usize])
        .sum();
    total / targets.len() as f64
}
