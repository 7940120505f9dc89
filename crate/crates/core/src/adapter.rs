// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ridge adapters from model hidden states to axis scores, and the steering
//! directions derived from them or from baselines.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};
use crate::stats;
use crate::steermodel::{score, ModelWeights};

/// Per-word-type mean hidden state at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenTable {
    pub layer: usize,
    /// Sorted ascending.
    pub word_ids: Vec<u32>,
    /// `n_words × d_model`.
    pub hidden: DMatrix<f64>,
    pub counts: Vec<usize>,
    /// Occurrences skipped because the word id is outside the model vocabulary.
    pub dropped: usize,
}

impl HiddenTable {
    pub fn row_of(&self, word_id: u32) -> Option<usize> {
        self.word_ids.binary_search(&word_id).ok()
    }

    pub fn d_model(&self) -> usize {
        self.hidden.ncols()
    }
}

/// Run every word stream through the model and average the hidden state at
/// each word's (single, hence last) token per word type.
///
/// Streams longer than the context window are scored with the sliding
/// window used everywhere else. Out-of-vocabulary ids are removed from the
/// stream before encoding and tallied.
pub fn collect_word_hidden(w: &ModelWeights, streams: &[Vec<u32>], layer: usize) -> Result<HiddenTable> {
    let vocab = w.config.vocab_size as u32;
    let d = w.config.d_model;
    let mut dropped = 0;
    let cleaned: Vec<Vec<u32>> = streams
        .iter()
        .map(|s| {
            let kept: Vec<u32> = s.iter().copied().filter(|&t| t < vocab).collect();
            dropped += s.len() - kept.len();
            kept
        })
        .collect();
    let per_stream: Vec<Option<Vec<f64>>> = cleaned
        .iter()
        .map(|s| match s.len() {
            0 => Ok(None),
            // A lone token has no next-token target but still has a hidden state.
            1 => Ok(Some(crate::steermodel::forward(w, s, None)?.1.layers[layer].clone())),
            _ => Ok(score(w, s, Some(layer))?.hidden),
        })
        .collect::<Result<_>>()?;
    let mut acc: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (s, h) in cleaned.iter().zip(&per_stream) {
        let Some(h) = h else { continue };
        for (pos, &t) in s.iter().enumerate() {
            let e = acc.entry(t).or_insert_with(|| (vec![0.0; d], 0));
            for (a, x) in e.0.iter_mut().zip(&h[pos * d..(pos + 1) * d]) {
                *a += x;
            }
            e.1 += 1;
        }
    }
    if acc.is_empty() {
        return Err(Error::invalid("no in-vocabulary words to encode"));
    }
    let word_ids: Vec<u32> = acc.keys().copied().collect();
    let counts: Vec<usize> = acc.values().map(|(_, c)| *c).collect();
    let hidden = DMatrix::from_fn(word_ids.len(), d, |i, j| {
        let (sum, c) = &acc[&word_ids[i]];
        sum[j] / *c as f64
    });
    Ok(HiddenTable { layer, word_ids, hidden, counts, dropped })
}

/// Rows of `table` and of `target_ids` that share a word id, in table order.
pub fn align(table: &HiddenTable, target_ids: &[u32]) -> Result<(Vec<usize>, Vec<usize>)> {
    let lookup: BTreeMap<u32, usize> = target_ids.iter().enumerate().map(|(i, &w)| (w, i)).collect();
    let pairs: Vec<(usize, usize)> = table
        .word_ids
        .iter()
        .enumerate()
        .filter_map(|(i, w)| lookup.get(w).map(|&j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid(format!(
            "no shared words between the hidden table ({} words) and the target ({} words)",
            table.word_ids.len(),
            target_ids.len()
        )));
    }
    Ok(pairs.into_iter().unzip())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub layer: usize,
    pub alphas: Vec<f64>,
    /// Fraction of word types held out for the fit report.
    pub holdout_frac: f64,
    pub n_folds: usize,
    pub n_top: usize,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            layer: 1,
            alphas: stats::log_grid(1e-2, 1e4, 13),
            holdout_frac: 0.3,
            n_folds: 5,
            n_top: 50,
            seed: 0,
        }
    }
}

pub const MIN_ADAPTER_WORDS: usize = 100;

/// `f(h) = W · ((h − mean) / sd) + b`, one row of `W` per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub layer: usize,
    /// `n_axes × d_model`, acting on standardized features.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Chosen ridge penalty per axis.
    pub alpha: Vec<f64>,
    pub feature_mean: DVector<f64>,
    pub feature_sd: DVector<f64>,
    /// Held-out Pearson r per axis.
    pub fit_report: Vec<f64>,
    pub n_train: usize,
    pub n_holdout: usize,
}

impl Adapter {
    pub fn n_axes(&self) -> usize {
        self.w.nrows()
    }

    /// Predict axis scores for a row-major `n × d_model` block of hidden states.
    pub fn predict_rows(&self, rows: &[f64]) -> DMatrix<f64> {
        let d = self.w.ncols();
        let n = rows.len() / d;
        let z = DMatrix::from_fn(n, d, |i, j| (rows[i * d + j] - self.feature_mean[j]) / self.feature_sd[j]);
        let mut out = z * self.w.transpose();
        for mut row in out.row_iter_mut() {
            row += self.b.transpose();
        }
        out
    }

    pub fn predict(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<f64> = h.transpose().iter().copied().collect();
        self.predict_rows(&rows)
    }
}

fn standardize(x: &DMatrix<f64>, mean: &DVector<f64>, sd: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - mean[j]) / sd[j])
}

fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

/// Mean held-out squared error of ridge over word folds, for one target.
fn cv_error(x: &DMatrix<f64>, y: &DMatrix<f64>, folds: &[usize], n_folds: usize, alpha: f64) -> Result<f64> {
    let mut sse = 0.0;
    for f in 0..n_folds {
        let train: Vec<usize> = (0..x.nrows()).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..x.nrows()).filter(|&i| folds[i] == f).collect();
        let fit = stats::ridge_solve(&select_rows(x, &train), &select_rows(y, &train), alpha, false)?;
        let pred = fit.predict(&select_rows(x, &test));
        for (k, &i) in test.iter().enumerate() {
            sse += (pred[(k, 0)] - y[(i, 0)]).powi(2);
        }
    }
    Ok(sse / x.nrows() as f64)
}

/// Fit one ridge per axis on a word-type split.
///
/// `scores` rows are aligned to `score_word_ids`. Standardization moments
/// come from the training words only. The penalty for each axis is picked
/// by `n_folds`-fold CV inside the training split (lowest mean squared
/// error, ties to the larger penalty), then refit on the whole split.
pub fn fit_adapter(
    table: &HiddenTable,
    score_word_ids: &[u32],
    scores: &DMatrix<f64>,
    cfg: &AdapterConfig,
) -> Result<Adapter> {
    if scores.nrows() != score_word_ids.len() {
        return Err(Error::invalid("scores and score_word_ids differ in length"));
    }
    if cfg.alphas.is_empty() {
        return Err(Error::invalid("alpha grid is empty"));
    }
    if !(0.0..1.0).contains(&cfg.holdout_frac) {
        return Err(Error::invalid("holdout_frac must lie in [0, 1)"));
    }
    let (hrows, srows) = align(table, score_word_ids)?;
    let n = hrows.len();
    if n < MIN_ADAPTER_WORDS {
        return Err(Error::invalid(format!(
            "{n} matched words, adapter needs at least {MIN_ADAPTER_WORDS}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(derive_seed(cfg.seed, 0)));
    let n_hold = (n as f64 * cfg.holdout_frac).round() as usize;
    let (hold, train) = order.split_at(n_hold);
    let n_train = train.len();
    if cfg.n_folds < 2 || n_train < cfg.n_folds {
        return Err(Error::invalid(format!(
            "cannot form {} CV folds from {n_train} training words",
            cfg.n_folds
        )));
    }
    let x_all = select_rows(&table.hidden, &hrows);
    let y_all = select_rows(scores, &srows);
    let x_train_raw = select_rows(&x_all, train);
    let (mean, sd) = stats::column_moments(&x_train_raw);
    let x_train = standardize(&x_train_raw, &mean, &sd);
    let x_hold = standardize(&select_rows(&x_all, hold), &mean, &sd);
    let folds: Vec<usize> = (0..n_train).map(|i| i % cfg.n_folds).collect();
    let k = scores.ncols();
    let d = table.d_model();
    let mut w = DMatrix::zeros(k, d);
    let mut b = DVector::zeros(k);
    let mut alphas = Vec::with_capacity(k);
    let mut fit_report = Vec::with_capacity(k);
    for axis in 0..k {
        let y_train = DMatrix::from_fn(n_train, 1, |i, _| y_all[(train[i], axis)]);
        let mut best = (f64::INFINITY, cfg.alphas[0]);
        for &a in &cfg.alphas {
            let e = cv_error(&x_train, &y_train, &folds, cfg.n_folds, a)?;
            let tie = (e - best.0).abs() <= 1e-12 * best.0.abs();
            if (e < best.0 && !tie) || (tie && a > best.1) {
                best = (e, a);
            }
        }
        let fit = stats::ridge_solve(&x_train, &y_train, best.1, false)?;
        w.row_mut(axis).copy_from(&fit.weights.column(0).transpose());
        b[axis] = fit.intercept[0];
        alphas.push(best.1);
        let r = if hold.len() >= 3 {
            let pred = fit.predict(&x_hold);
            let obs: Vec<f64> = hold.iter().map(|&i| y_all[(i, axis)]).collect();
            stats::pearson(pred.column(0).as_slice(), &obs).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        fit_report.push(r);
    }
    Ok(Adapter {
        layer: table.layer,
        w,
        b,
        alpha: alphas,
        feature_mean: mean,
        feature_sd: sd,
        fit_report,
        n_train,
        n_holdout: hold.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VectorSource {
    BrainAxis { axis: usize, flipped: bool },
    ActAdd { label: String, n_top: usize },
    Random { seed: u64 },
    TextProbe { label: String },
}

impl VectorSource {
    pub fn describe(&self) -> String {
        match self {
            VectorSource::BrainAxis { axis, flipped } => {
                format!("brain_axis({axis}{})", if *flipped { ",flipped" } else { "" })
            }
            VectorSource::ActAdd { label, n_top } => format!("actadd({label},{n_top})"),
            VectorSource::Random { seed } => format!("random({seed})"),
            VectorSource::TextProbe { label } => format!("text_probe({label})"),
        }
    }
}

/// A unit steering direction with its origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub direction: Vec<f64>,
    pub source: VectorSource,
    pub layer: usize,
}

impl SteeringVector {
    fn from_raw(raw: Vec<f64>, source: VectorSource, layer: usize) -> Result<Self> {
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 1e-300) || !n.is_finite() {
            return Err(Error::degenerate(format!("{} direction has zero norm", source.describe())));
        }
        Ok(SteeringVector {
            direction: raw.into_iter().map(|x| x / n).collect(),
            source,
            layer,
        })
    }

    pub fn cosine(&self, other: &SteeringVector) -> f64 {
        self.direction.iter().zip(&other.direction).map(|(a, b)| a * b).sum()
    }

    /// The same direction with the opposite sign.
    pub fn negated(&self) -> SteeringVector {
        let mut v = self.clone();
        v.direction.iter_mut().for_each(|x| *x = -*x);
        if let VectorSource::BrainAxis { flipped, .. } = &mut v.source {
            *flipped = !*flipped;
        }
        v
    }
}

/// Axis `k` of the adapter mapped back to raw hidden units and normalized.
pub fn brain_axis_vector(adapter: &Adapter, k: usize) -> Result<SteeringVector> {
    if k >= adapter.n_axes() {
        return Err(Error::invalid(format!("axis {k} >= n_axes {}", adapter.n_axes())));
    }
    let raw: Vec<f64> = (0..adapter.w.ncols())
        .map(|j| adapter.w[(k, j)] / adapter.feature_sd[j])
        .collect();
    SteeringVector::from_raw(raw, VectorSource::BrainAxis { axis: k, flipped: false }, adapter.layer)
}

/// Mean hidden state of the `n_top` highest-label words minus that of the
/// `n_top` lowest. Ties at the cut go to the smaller word id.
pub fn actadd_vector(table: &HiddenTable, label: &str, values: &[f64], n_top: usize) -> Result<SteeringVector> {
    let n = table.word_ids.len();
    if values.len() != n {
        return Err(Error::invalid("label values must align with the hidden table"));
    }
    if n_top == 0 || 2 * n_top > n {
        return Err(Error::invalid(format!("need 2·n_top <= {n} words, n_top = {n_top}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("label values must be finite"));
    }
    let mut desc: Vec<usize> = (0..n).collect();
    desc.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(table.word_ids[a].cmp(&table.word_ids[b])));
    let mut asc: Vec<usize> = (0..n).collect();
    asc.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(table.word_ids[a].cmp(&table.word_ids[b])));
    let top = &desc[..n_top];
    let bottom = &asc[..n_top];
    let label_gap = stats::mean(&top.iter().map(|&i| values[i]).collect::<Vec<_>>())
        - stats::mean(&bottom.iter().map(|&i| values[i]).collect::<Vec<_>>());
    if label_gap <= 0.0 {
        return Err(Error::degenerate(format!("label {label} does not separate top and bottom words")));
    }
    let d = table.d_model();
    let raw: Vec<f64> = (0..d)
        .map(|j| {
            let t = stats::sum(top.iter().map(|&i| table.hidden[(i, j)])) / n_top as f64;
            let b = stats::sum(bottom.iter().map(|&i| table.hidden[(i, j)])) / n_top as f64;
            t - b
        })
        .collect();
    SteeringVector::from_raw(raw, VectorSource::ActAdd { label: label.to_string(), n_top }, table.layer)
}

/// Isotropic Gaussian direction.
pub fn random_vector(d_model: usize, layer: usize, seed: u64) -> Result<SteeringVector> {
    if d_model == 0 {
        return Err(Error::invalid("d_model must be >= 1"));
    }
    let mut r = rng(seed);
    let raw: Vec<f64> = (0..d_model).map(|_| StandardNormal.sample(&mut r)).collect();
    SteeringVector::from_raw(raw, VectorSource::Random { seed }, layer)
}

/// Ridge probe for one text label through the same pipeline as the brain
/// adapter, returned as a steering direction.
pub fn text_probe(
    table: &HiddenTable,
    label: &str,
    word_ids: &[u32],
    values: &[f64],
    cfg: &AdapterConfig,
) -> Result<(SteeringVector, Adapter)> {
    let y = DMatrix::from_column_slice(values.len(), 1, values);
    let adapter = fit_adapter(table, word_ids, &y, cfg)?;
    let mut v = brain_axis_vector(&adapter, 0)?;
    v.source = VectorSource::TextProbe { label: label.to_string() };
    Ok((v, adapter))
}
