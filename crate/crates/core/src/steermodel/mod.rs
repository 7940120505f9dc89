// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small decoder-only transformer with hidden-state read and inject hooks.
//!
//! Architecture: token embedding scaled by `sqrt(d_model)`, rotary position
//! encoding inside attention, pre-norm residual blocks (RMSNorm, multi-head
//! causal attention, tanh-GELU MLP), a final RMSNorm and an output head tied
//! to the embedding. No biases. Compute is `f64`; the archive stores `f32`.
//!
//! Attention sees at most `context_len` positions (the current one included).
//! For sequences no longer than the context this is plain causal attention.
//! Longer sequences use a sliding band, which is exactly what KV-cached
//! generation with a truncated cache computes, so scoring and generation
//! share one definition of context.
//!
//! Hidden-state indexing: trace layer 0 is the scaled embedding, layer `l`
//! (1-based) is the residual stream after block `l`. Steering at layer `l`
//! adds `strength * direction` to that stream at every position, before
//! block `l + 1` reads it.

mod forward;
mod generate;
mod ops;
mod train;

pub use forward::{forward, score, HiddenTrace, Scored};
pub use generate::{generate, perplexity, Generation};
pub use train::{train_toy_lm, unigram_perplexity, TrainReport, TrainSpec};

pub use forward::{loss_and_grad, loss_only};

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            context_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::invalid("model dimensions must be positive (vocab >= 2)"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::invalid("head dimension must be even for rotary encoding"));
        }
        if self.context_len == 0 {
            return Err(Error::invalid("context_len must be >= 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Parameters of one residual block. Matrices are row-major and applied as
/// `x · W`, so `wq` is `d_model × d_model` and `w1` is `d_model × d_ff`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub mlp_norm: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `vocab_size × d_model`; also the output head.
    pub tok_emb: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
}

const INIT_STD: f64 = 0.02;

impl ModelWeights {
    /// Seeded initialisation. Residual output projections are scaled down by
    /// `sqrt(2 · n_layers)`; norm gains start at one.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let out_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut stream = 0u64;
        let mut normal = |n: usize, sd: f64| -> Vec<f64> {
            let mut r = rng(derive_seed(config.seed, stream));
            stream += 1;
            let dist = Normal::new(0.0, sd).expect("positive sd");
            (0..n).map(|_| dist.sample(&mut r)).collect()
        };
        let tok_emb = normal(v * d, INIT_STD);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: normal(d * d, INIT_STD),
                wk: normal(d * d, INIT_STD),
                wv: normal(d * d, INIT_STD),
                wo: normal(d * d, out_std),
                mlp_norm: vec![1.0; d],
                w1: normal(d * f, INIT_STD),
                w2: normal(f * d, out_std),
            })
            .collect();
        let mut w = ModelWeights {
            config: config.clone(),
            tok_emb,
            layers,
            final_norm: vec![1.0; d],
        };
        w.round_to_f32();
        Ok(w)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, t) in z.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    /// Named tensors with shapes, in archive order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &Vec<f64>)> {
        let c = &self.config;
        let (v, d, f) = (c.vocab_size, c.d_model, c.d_ff);
        let mut out = vec![("tok_emb".to_string(), vec![v, d], &self.tok_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("attn_norm"), vec![d], &l.attn_norm));
            out.push((p("wq"), vec![d, d], &l.wq));
            out.push((p("wk"), vec![d, d], &l.wk));
            out.push((p("wv"), vec![d, d], &l.wv));
            out.push((p("wo"), vec![d, d], &l.wo));
            out.push((p("mlp_norm"), vec![d], &l.mlp_norm));
            out.push((p("w1"), vec![d, f], &l.w1));
            out.push((p("w2"), vec![f, d], &l.w2));
        }
        out.push(("final_norm".to_string(), vec![d], &self.final_norm));
        out
    }

    /// Mutable view in the same order as [`ModelWeights::tensors`]. The flag
    /// marks matrices (the tensors that receive weight decay).
    pub fn tensors_mut(&mut self) -> Vec<(String, bool, &mut Vec<f64>)> {
        let mut out = vec![("tok_emb".to_string(), true, &mut self.tok_emb)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("attn_norm"), false, &mut l.attn_norm));
            out.push((p("wq"), true, &mut l.wq));
            out.push((p("wk"), true, &mut l.wk));
            out.push((p("wv"), true, &mut l.wv));
            out.push((p("wo"), true, &mut l.wo));
            out.push((p("mlp_norm"), false, &mut l.mlp_norm));
            out.push((p("w1"), true, &mut l.w1));
            out.push((p("w2"), true, &mut l.w2));
        }
        out.push(("final_norm".to_string(), false, &mut self.final_norm));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Round every parameter to the nearest `f32`, so a saved archive
    /// reloads to exactly these weights.
    pub fn round_to_f32(&mut self) {
        for (_, _, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    /// Check shapes against the config and finiteness.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Format(format!(
                "{} layers, config says {}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        for (name, shape, t) in self.tensors() {
            if shape.iter().product::<usize>() != t.len() {
                return Err(Error::Format(format!("tensor {name}: shape {shape:?}, {} values", t.len())));
            }
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("tensor {name} is not finite")));
            }
        }
        Ok(())
    }

    /// Write the tensor archive: little-endian `u64` header length, JSON
    /// header, then the `f32` payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (name, shape, t) in self.tensors() {
            entries.push(TensorEntry {
                name,
                dtype: "f32".into(),
                shape,
                offset: payload.len() as u64,
            });
            for &x in t.iter() {
                payload.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let header = ArchiveHeader {
            format: ARCHIVE_FORMAT.into(),
            config: self.config.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&(json.len() as u64).to_le_bytes())
            .and_then(|_| f.write_all(&json))
            .and_then(|_| f.write_all(&payload))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_archive_bytes(&bytes)
    }

    pub fn from_archive_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("archive shorter than its header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = &bytes[8..];
        if hlen > body.len() {
            return Err(Error::Format("header length exceeds file size".into()));
        }
        let header: ArchiveHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(e.to_string()))?;
        if header.format != ARCHIVE_FORMAT {
            return Err(Error::Format(format!("unknown archive format {:?}", header.format)));
        }
        let payload = &body[hlen..];
        let mut w = ModelWeights::init(&header.config)?;
        let expected: Vec<(String, Vec<usize>)> =
            w.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if header.tensors.len() != expected.len() {
            return Err(Error::Format(format!(
                "archive has {} tensors, architecture needs {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for ((name, _, dst), (ename, eshape)) in w.tensors_mut().into_iter().zip(&expected) {
            debug_assert_eq!(&name, ename);
            let entry = header
                .tensors
                .iter()
                .find(|t| &t.name == ename)
                .ok_or_else(|| Error::Format(format!("missing tensor {ename}")))?;
            if entry.dtype != "f32" || &entry.shape != eshape {
                return Err(Error::Format(format!(
                    "tensor {ename}: {} {:?}, expected f32 {:?}",
                    entry.dtype, entry.shape, eshape
                )));
            }
            let start = entry.offset as usize;
            let end = start + 4 * dst.len();
            if end > payload.len() {
                return Err(Error::Format(format!("tensor {ename} runs past the payload")));
            }
            for (x, chunk) in dst.iter_mut().zip(payload[start..end].chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
            }
        }
        w.validate()?;
        Ok(w)
    }
}

const ARCHIVE_FORMAT: &str = "neuraxis-tensors-v1";

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    format: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

/// Additive steering at one trace layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerSpec {
    /// Trace layer index in `0..=n_layers`.
    pub layer: usize,
    pub direction: Vec<f64>,
    pub strength: f64,
}

impl SteerSpec {
    /// Checked constructor: `direction` must have unit norm.
    pub fn new(layer: usize, direction: Vec<f64>, strength: f64) -> Result<Self> {
        let n = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("steering direction norm {n}, expected 1")));
        }
        if !strength.is_finite() {
            return Err(Error::invalid("steering strength must be finite"));
        }
        Ok(SteerSpec { layer, direction, strength })
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer > cfg.n_layers {
            return Err(Error::invalid(format!(
                "steer layer {} > n_layers {}",
                self.layer, cfg.n_layers
            )));
        }
        if self.direction.len() != cfg.d_model {
            return Err(Error::invalid(format!(
                "steer direction has {} dims, model has {}",
                self.direction.len(),
                cfg.d_model
            )));
        }
        Ok(())
    }

    /// Add the injection to a row-major `n × d` block. Strength zero is a no-op,
    /// so the unsteered path stays bit-exact.
    pub(crate) fn apply(&self, rows: &mut [f64]) {
        if self.strength == 0.0 {
            return;
        }
        let d = self.direction.len();
        for row in rows.chunks_exact_mut(d) {
            for (x, u) in row.iter_mut().zip(&self.direction) {
                *x += self.strength * u;
            }
        }
    }
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::invalid(format!("token {t} outside vocab {}", cfg.vocab_size)));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
