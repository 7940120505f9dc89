// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token training with AdamW.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forward::loss_only;
use super::{check_tokens, loss_and_grad, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};
use crate::synthgen::Corpus;

pub const MIN_TRAIN_TOKENS: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Cosine decay floor as a fraction of `lr`.
    pub min_lr_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Trailing fraction of sequences held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            steps: 400,
            batch_size: 8,
            lr: 3e-3,
            warmup_steps: 40,
            min_lr_frac: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_perplexity: f64,
    /// Perplexity of the add-one unigram model fitted on the training split.
    pub unigram_perplexity: f64,
    pub n_train_tokens: usize,
    pub n_val_tokens: usize,
}

/// Held-out perplexity of an add-one-smoothed unigram model.
pub fn unigram_perplexity(train: &[Vec<u32>], val: &[Vec<u32>], vocab: usize) -> f64 {
    let mut counts = vec![1.0f64; vocab];
    let mut total = vocab as f64;
    for &t in train.iter().flatten() {
        counts[t as usize] += 1.0;
        total += 1.0;
    }
    let (nll, n) = val
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), &t| (s - (counts[t as usize] / total).ln(), n + 1));
    (nll / n.max(1) as f64).exp()
}

fn lr_at(spec: &TrainSpec, step: usize) -> f64 {
    if step < spec.warmup_steps {
        return spec.lr * (step + 1) as f64 / spec.warmup_steps as f64;
    }
    let span = spec.steps.saturating_sub(spec.warmup_steps).max(1);
    let progress = (step - spec.warmup_steps) as f64 / span as f64;
    let floor = spec.lr * spec.min_lr_frac;
    floor + 0.5 * (spec.lr - floor) * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Mean per-token NLL over consecutive windows of `len` tokens.
fn eval_nll(w: &ModelWeights, seqs: &[Vec<u32>], len: usize) -> f64 {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for s in seqs {
        for chunk in s.chunks_exact(len) {
            inputs.push(chunk[..len - 1].to_vec());
            targets.push(chunk[1..].to_vec());
        }
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (xi, yi) in inputs.chunks(16).zip(targets.chunks(16)) {
        let x: Vec<u32> = xi.concat();
        let y: Vec<u32> = yi.concat();
        total += loss_only(w, &x, &y, xi.len(), len - 1) * y.len() as f64;
        n += y.len();
    }
    total / n.max(1) as f64
}

/// Train from a seeded initialisation. The returned weights are rounded to
/// `f32`, so saving and reloading is lossless.
pub fn train_toy_lm(corpus: &Corpus, config: &ModelConfig, spec: &TrainSpec) -> Result<(ModelWeights, TrainReport)> {
    config.validate()?;
    let n_tokens = corpus.n_tokens();
    if n_tokens < MIN_TRAIN_TOKENS {
        return Err(Error::invalid(format!(
            "corpus has {n_tokens} tokens, training needs at least {MIN_TRAIN_TOKENS}"
        )));
    }
    for s in &corpus.sequences {
        check_tokens(config, s)?;
    }
    if spec.steps == 0 || spec.batch_size == 0 {
        return Err(Error::invalid("steps and batch_size must be >= 1"));
    }
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(Error::invalid("val_fraction must lie in [0, 1)"));
    }
    let min_len = corpus.sequences.iter().map(Vec::len).min().unwrap_or(0);
    if min_len < 2 {
        return Err(Error::invalid("every training sequence needs at least two tokens"));
    }
    let window = min_len.min(config.context_len + 1);
    let n_seq = corpus.sequences.len();
    let n_val = ((n_seq as f64 * spec.val_fraction).ceil() as usize).clamp(1, n_seq - 1);
    let (train, val) = corpus.sequences.split_at(n_seq - n_val);

    let mut w = ModelWeights::init(config)?;
    let mut m1 = w.zeros_like();
    let mut m2 = w.zeros_like();
    let mut r = rng(derive_seed(spec.seed, 1));
    let seq = window - 1;
    let mut losses = Vec::with_capacity(spec.steps);
    let mut inputs = vec![0u32; spec.batch_size * seq];
    let mut targets = vec![0u32; spec.batch_size * seq];
    for step in 0..spec.steps {
        for b in 0..spec.batch_size {
            let s = &train[r.random_range(0..train.len())];
            let start = r.random_range(0..=s.len() - window);
            inputs[b * seq..(b + 1) * seq].copy_from_slice(&s[start..start + seq]);
            targets[b * seq..(b + 1) * seq].copy_from_slice(&s[start + 1..start + window]);
        }
        let (loss, mut g) = loss_and_grad(&w, &inputs, &targets, spec.batch_size, seq);
        if !loss.is_finite() || !g.is_finite() {
            return Err(Error::Diverged {
                step,
                last_finite: Box::new(w),
            });
        }
        losses.push(loss);
        let norm = g
            .tensors()
            .iter()
            .flat_map(|(_, _, t)| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let clip = if spec.grad_clip > 0.0 && norm > spec.grad_clip { spec.grad_clip / norm } else { 1.0 };
        let lr = lr_at(spec, step);
        let t = (step + 1) as i32;
        let (bc1, bc2) = (1.0 - spec.beta1.powi(t), 1.0 - spec.beta2.powi(t));
        let prev = w.clone();
        let params = w.tensors_mut();
        let grads = g.tensors_mut();
        let firsts = m1.tensors_mut();
        let seconds = m2.tensors_mut();
        for ((((_, decay, p), (_, _, gr)), (_, _, a)), (_, _, b)) in
            params.into_iter().zip(grads).zip(firsts).zip(seconds)
        {
            let wd = if decay { spec.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                let gi = gr[i] * clip;
                a[i] = spec.beta1 * a[i] + (1.0 - spec.beta1) * gi;
                b[i] = spec.beta2 * b[i] + (1.0 - spec.beta2) * gi * gi;
                let step_dir = (a[i] / bc1) / ((b[i] / bc2).sqrt() + spec.eps);
                p[i] -= lr * (step_dir + wd * p[i]);
            }
        }
        if !w.is_finite() {
            return Err(Error::Diverged {
                step,
                last_finite: Box::new(prev),
            });
        }
    }
    w.round_to_f32();
    let val_perplexity = eval_nll(&w, val, window).exp();
    let report = TrainReport {
        train_loss: losses,
        val_perplexity,
        unigram_perplexity: unigram_perplexity(train, val, config.vocab_size),
        n_train_tokens: train.iter().map(Vec::len).sum(),
        n_val_tokens: val.iter().map(Vec::len).sum(),
    };
    Ok((w, report))
}
