// SPDX-License-Identifier: MIT OR Apache-2.0

//! KV-cached incremental decoding and perplexity.

use std::collections::VecDeque;

use rand::Rng;

use super::ops::{self, gemm, gelu, rmsnorm, rope_row};
use super::{check_tokens, score, ModelWeights, SteerSpec};
use crate::error::{Error, Result};
use crate::rng::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Generated tokens only (the prompt is not repeated).
    pub tokens: Vec<u32>,
    /// Set when prompt plus continuation outgrew the context window and the
    /// oldest cache entries were dropped.
    pub truncated: bool,
}

/// One-token-at-a-time decoder. Keeps at most `context_len` key/value rows
/// per layer; older rows fall out of the window.
pub(crate) struct Decoder<'a> {
    w: &'a ModelWeights,
    steer: Option<&'a SteerSpec>,
    keys: Vec<VecDeque<Vec<f64>>>,
    values: Vec<VecDeque<Vec<f64>>>,
    pos: usize,
    pub(crate) truncated: bool,
}

impl<'a> Decoder<'a> {
    pub(crate) fn new(w: &'a ModelWeights, steer: Option<&'a SteerSpec>) -> Self {
        let n = w.config.n_layers;
        Decoder {
            w,
            steer,
            keys: vec![VecDeque::new(); n],
            values: vec![VecDeque::new(); n],
            pos: 0,
            truncated: false,
        }
    }

    fn inject(&self, layer: usize, x: &mut [f64]) {
        if let Some(s) = self.steer {
            if s.layer == layer {
                s.apply(x);
            }
        }
    }

    /// Feed one token; returns next-token logits.
    pub(crate) fn step(&mut self, token: u32) -> Vec<f64> {
        let c = &self.w.config;
        let (d, f, hd, nh) = (c.d_model, c.d_ff, c.head_dim(), c.n_heads);
        let scale = 1.0 / (hd as f64).sqrt();
        let emb_scale = (d as f64).sqrt();
        let mut x: Vec<f64> = self.w.tok_emb[token as usize * d..][..d].iter().map(|v| v * emb_scale).collect();
        self.inject(0, &mut x);
        for (li, lw) in self.w.layers.iter().enumerate() {
            let (h1, _, _) = rmsnorm(&x, &lw.attn_norm, d);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            gemm(1, d, d, &h1, false, &lw.wq, false, &mut q, false);
            gemm(1, d, d, &h1, false, &lw.wk, false, &mut k, false);
            gemm(1, d, d, &h1, false, &lw.wv, false, &mut v, false);
            rope_row(&mut q, self.pos, hd, 1.0);
            rope_row(&mut k, self.pos, hd, 1.0);
            let (keys, values) = (&mut self.keys[li], &mut self.values[li]);
            keys.push_back(k);
            values.push_back(v);
            if keys.len() > c.context_len {
                keys.pop_front();
                values.pop_front();
                self.truncated = true;
            }
            let mut ctx = vec![0.0; d];
            let mut p = vec![0.0; keys.len()];
            for h in 0..nh {
                let off = h * hd;
                let qh = &q[off..off + hd];
                for (pj, kj) in p.iter_mut().zip(keys.iter()) {
                    *pj = ops::dot(qh, &kj[off..off + hd]) * scale;
                }
                ops::softmax_in_place(&mut p);
                let ch = &mut ctx[off..off + hd];
                for (pj, vj) in p.iter().zip(values.iter()) {
                    for (cv, xv) in ch.iter_mut().zip(&vj[off..off + hd]) {
                        *cv += pj * xv;
                    }
                }
            }
            gemm(1, d, d, &ctx, false, &lw.wo, false, &mut x, true);
            let (h2, _, _) = rmsnorm(&x, &lw.mlp_norm, d);
            let mut u = vec![0.0; f];
            gemm(1, d, f, &h2, false, &lw.w1, false, &mut u, false);
            u.iter_mut().for_each(|z| *z = gelu(*z));
            gemm(1, f, d, &u, false, &lw.w2, false, &mut x, true);
            self.inject(li + 1, &mut x);
        }
        self.pos += 1;
        let (hf, _, _) = rmsnorm(&x, &self.w.final_norm, d);
        let mut logits = vec![0.0; c.vocab_size];
        gemm(1, d, c.vocab_size, &hf, false, &self.w.tok_emb, true, &mut logits, false);
        logits
    }
}

/// Draw from `softmax(logits / temperature)`; temperature 0 is argmax with
/// ties going to the lowest id.
fn sample(logits: &mut [f64], temperature: f64, u: impl FnOnce() -> f64) -> u32 {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    logits.iter_mut().for_each(|l| *l /= temperature);
    ops::softmax_in_place(logits);
    let target = u();
    let mut acc = 0.0;
    for (i, &p) in logits.iter().enumerate() {
        acc += p;
        if target < acc {
            return i as u32;
        }
    }
    // Round-off left the cumulative sum just under one.
    logits.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}

/// Ancestral sampling with a seeded stream. Steering, when given, is applied
/// on every step, prompt tokens included.
pub fn generate(
    w: &ModelWeights,
    prompt: &[u32],
    n_tokens: usize,
    temperature: f64,
    seed: u64,
    steer: Option<&SteerSpec>,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must be nonempty"));
    }
    if n_tokens == 0 {
        return Err(Error::invalid("n_tokens must be >= 1"));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature must be finite and >= 0"));
    }
    check_tokens(&w.config, prompt)?;
    if let Some(s) = steer {
        s.check(&w.config)?;
    }
    let mut r = rng(seed);
    let mut dec = Decoder::new(w, steer);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = dec.step(t);
    }
    let mut out = Vec::with_capacity(n_tokens);
    loop {
        let next = sample(&mut logits, temperature, || r.random::<f64>());
        out.push(next);
        if out.len() == n_tokens {
            break;
        }
        logits = dec.step(next);
    }
    Ok(Generation {
        tokens: out,
        truncated: dec.truncated,
    })
}

/// `exp` of the mean next-token NLL under the unsteered model.
pub fn perplexity(w: &ModelWeights, tokens: &[u32]) -> Result<f64> {
    let s = score(w, tokens, None)?;
    Ok(s.mean_nll_from(1).exp())
}
