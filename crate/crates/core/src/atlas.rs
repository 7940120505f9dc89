// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level connectivity atlas.
//!
//! Word features at several lags are regressed onto connectivity states with
//! ridge regression. Predictions are made out-of-fold by run, each window is
//! assigned to the most recent word onset at or before the window start, and
//! predicted states are averaged per word type.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::axes::{match_axes, AxisBasis, AxisMatching};
use crate::error::{Error, Result};
use crate::stats;
use crate::synthgen::{WordEvent, FEATURES};

pub const DEFAULT_LAGS: [f64; 3] = [0.0, 0.5, 1.0];

/// Logarithmic ridge grid, 1e-2 … 1e4, 13 points.
pub fn default_alphas() -> Vec<f64> {
    stats::log_grid(1e-2, 1e4, 13)
}

/// One run's inputs to the design.
#[derive(Debug, Clone, Copy)]
pub struct RunWindows<'a> {
    pub events: &'a [WordEvent],
    pub window_times: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    /// (n_windows × n_features·n_lags), standardized; missing lags are 0.
    pub x: DMatrix<f64>,
    pub feature_names: Vec<String>,
    /// Indices into [`FEATURES`] of the included features.
    pub features: Vec<usize>,
    pub lags_s: Vec<f64>,
    /// Column means and sds over the windows where the lag was covered.
    pub means: DVector<f64>,
    pub sds: DVector<f64>,
    /// Windows with no preceding word, per lag.
    pub missing_per_lag: Vec<usize>,
    /// Run index of every row.
    pub run_of_row: Vec<usize>,
}

impl DesignMatrix {
    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }
}

/// Index of the event with the latest onset `<= t`, if any.
pub fn most_recent(events: &[WordEvent], t: f64) -> Option<usize> {
    let k = events.partition_point(|e| e.onset <= t);
    k.checked_sub(1)
}

/// Build the lagged design for all runs of one subject.
///
/// Column block `l` holds the features of the word whose onset is the most
/// recent at or before `t − lags[l]`. Columns are z-scored over covered
/// windows pooled across runs; uncovered entries are set to 0.
pub fn build_design(runs: &[RunWindows<'_>], lags: &[f64], features: &[usize]) -> Result<DesignMatrix> {
    if runs.is_empty() || runs.iter().all(|r| r.events.is_empty()) {
        return Err(Error::invalid("build_design: empty event list"));
    }
    if lags.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::invalid("build_design: lags must be nonnegative"));
    }
    if features.is_empty() || features.iter().any(|&f| f >= FEATURES.len()) {
        return Err(Error::invalid("build_design: invalid feature selection"));
    }
    for r in runs {
        if r.events.windows(2).any(|w| w[1].onset < w[0].onset) {
            return Err(Error::invalid("build_design: events must be sorted by onset"));
        }
    }
    let nf = features.len();
    let n_cols = nf * lags.len();
    let n_rows: usize = runs.iter().map(|r| r.window_times.len()).sum();
    let mut raw = DMatrix::zeros(n_rows, n_cols);
    let mut covered = vec![vec![false; lags.len()]; n_rows];
    let mut run_of_row = Vec::with_capacity(n_rows);
    let mut row = 0;
    for (ri, r) in runs.iter().enumerate() {
        for &t in r.window_times {
            for (li, &lag) in lags.iter().enumerate() {
                if let Some(e) = most_recent(r.events, t - lag) {
                    covered[row][li] = true;
                    for (fi, &f) in features.iter().enumerate() {
                        raw[(row, li * nf + fi)] = r.events[e].feature(f);
                    }
                }
            }
            run_of_row.push(ri);
            row += 1;
        }
    }
    let mut means = DVector::zeros(n_cols);
    let mut sds = DVector::from_element(n_cols, 1.0);
    let mut x = DMatrix::zeros(n_rows, n_cols);
    let mut missing_per_lag = vec![0usize; lags.len()];
    for (li, miss) in missing_per_lag.iter_mut().enumerate() {
        *miss = covered.iter().filter(|c| !c[li]).count();
        for fi in 0..nf {
            let c = li * nf + fi;
            let vals: Vec<f64> = (0..n_rows).filter(|&i| covered[i][li]).map(|i| raw[(i, c)]).collect();
            if vals.is_empty() {
                continue;
            }
            let m = stats::mean(&vals);
            let s = stats::std_dev(&vals, 0);
            let s = if s > 1e-12 * m.abs().max(1.0) { s } else { 1.0 };
            means[c] = m;
            sds[c] = s;
            for i in (0..n_rows).filter(|&i| covered[i][li]) {
                x[(i, c)] = (raw[(i, c)] - m) / s;
            }
        }
    }
    let feature_names = lags
        .iter()
        .flat_map(|lag| features.iter().map(move |&f| format!("{}@{lag:.1}s", FEATURES[f])))
        .collect();
    Ok(DesignMatrix {
        x,
        feature_names,
        features: features.to_vec(),
        lags_s: lags.to_vec(),
        means,
        sds,
        missing_per_lag,
        run_of_row,
    })
}

// ---------------------------------------------------------------------------
// State model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateModel {
    /// (n_cols × state_dim), on standardized design columns.
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub alpha: f64,
    /// (alpha, mean held-out R² over run folds)
    pub cv_table: Vec<(f64, f64)>,
}

impl StateModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.intercept.transpose();
        }
        out
    }

    /// Weights and intercept on the raw (unstandardized) feature scale.
    pub fn raw_weights(&self, design: &DesignMatrix) -> (DMatrix<f64>, DVector<f64>) {
        let mut w = self.weights.clone();
        for i in 0..w.nrows() {
            let s = design.sds[i];
            w.row_mut(i).apply(|v| *v /= s);
        }
        let b = &self.intercept - w.transpose() * &design.means;
        (w, b)
    }
}

/// Fold of each run: runs are taken in index order and dealt round-robin.
pub fn run_folds(n_runs: usize, n_folds: usize) -> Vec<usize> {
    (0..n_runs).map(|r| r % n_folds).collect()
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Ridge from design to states with alpha chosen by run-fold CV.
///
/// Returns the full-data model and the out-of-fold predictions (each row
/// predicted by the model that did not see its run).
pub fn fit_state_model(
    design: &DesignMatrix,
    states: &DMatrix<f64>,
    alphas: &[f64],
    n_folds: usize,
) -> Result<(StateModel, DMatrix<f64>)> {
    if n_folds < 2 {
        return Err(Error::invalid("fit_state_model: n_folds must be >= 2"));
    }
    if states.nrows() != design.x.nrows() {
        return Err(Error::invalid("fit_state_model: states and design differ in row count"));
    }
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::invalid("fit_state_model: alphas must be positive"));
    }
    let n_runs = design.run_of_row.iter().copied().max().map_or(0, |m| m + 1);
    if n_runs < n_folds {
        return Err(Error::invalid(format!(
            "fit_state_model: {n_runs} runs cannot fill {n_folds} folds"
        )));
    }
    let fold_of_run = run_folds(n_runs, n_folds);
    let fold_rows: Vec<(Vec<usize>, Vec<usize>)> = (0..n_folds)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..design.x.nrows()).partition(|&i| fold_of_run[design.run_of_row[i]] == f);
            (train, test)
        })
        .collect();

    let scores: Vec<Vec<f64>> = fold_rows
        .par_iter()
        .map(|(train, test)| {
            let xtr = select_rows(&design.x, train);
            let ytr = select_rows(states, train);
            let xte = select_rows(&design.x, test);
            let yte = select_rows(states, test);
            alphas
                .iter()
                .map(|&a| {
                    let fit = stats::ridge_solve(&xtr, &ytr, a, false)?;
                    Ok(stats::r_squared(&yte, &fit.predict(&xte)))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let cv_table: Vec<(f64, f64)> = alphas
        .iter()
        .enumerate()
        .map(|(ai, &a)| (a, stats::mean(&scores.iter().map(|s| s[ai]).collect::<Vec<_>>())))
        .collect();
    let alpha = cv_table
        .iter()
        .copied()
        .fold((alphas[0], f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
        .0;

    let mut oof = DMatrix::zeros(states.nrows(), states.ncols());
    let fold_preds: Vec<DMatrix<f64>> = fold_rows
        .par_iter()
        .map(|(train, test)| {
            let fit = stats::ridge_solve(&select_rows(&design.x, train), &select_rows(states, train), alpha, false)?;
            Ok(fit.predict(&select_rows(&design.x, test)))
        })
        .collect::<Result<Vec<_>>>()?;
    for ((_, test), pred) in fold_rows.iter().zip(&fold_preds) {
        for (k, &i) in test.iter().enumerate() {
            oof.row_mut(i).copy_from(&pred.row(k));
        }
    }
    let full = stats::ridge_solve(&design.x, states, alpha, false)?;
    Ok((
        StateModel { weights: full.weights, intercept: full.intercept, alpha, cv_table },
        oof,
    ))
}

// ---------------------------------------------------------------------------
// Word atlas
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// "oof", "in-sample" or "average".
    pub kind: String,
    pub subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordAtlas {
    pub word_ids: Vec<u32>,
    /// (n_word_types × state_dim)
    pub atlas: DMatrix<f64>,
    pub counts: Vec<usize>,
    pub provenance: Provenance,
    /// Windows starting before the first word onset of their run.
    pub dropped_windows: usize,
}

impl WordAtlas {
    pub fn state_dim(&self) -> usize {
        self.atlas.ncols()
    }

    pub fn n_words(&self) -> usize {
        self.word_ids.len()
    }

    pub fn row_of(&self, word_id: u32) -> Option<usize> {
        self.word_ids.binary_search(&word_id).ok()
    }
}

/// Predictions of one run aligned with its windows.
#[derive(Debug, Clone, Copy)]
pub struct RunPredictions<'a> {
    pub predictions: &'a DMatrix<f64>,
    pub events: &'a [WordEvent],
    pub window_times: &'a [f64],
}

/// Average predicted states per word type.
///
/// Each window goes to the most recent word onset at or before its start
/// time; word types without windows are absent.
pub fn build_word_atlas(runs: &[RunPredictions<'_>], provenance: Provenance) -> Result<WordAtlas> {
    let dim = runs.first().map(|r| r.predictions.ncols()).ok_or_else(|| Error::invalid("no runs"))?;
    let mut groups: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    let mut dropped = 0;
    for (ri, r) in runs.iter().enumerate() {
        if r.predictions.nrows() != r.window_times.len() || r.predictions.ncols() != dim {
            return Err(Error::invalid("predictions are not aligned with window times"));
        }
        let mut events = r.events.to_vec();
        events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.word_id.cmp(&b.word_id)));
        for (wi, &t) in r.window_times.iter().enumerate() {
            match most_recent(&events, t) {
                Some(e) => groups.entry(events[e].word_id).or_default().push((ri, wi)),
                None => dropped += 1,
            }
        }
    }
    let n = groups.len();
    let mut atlas = DMatrix::zeros(n, dim);
    let mut word_ids = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n);
    for (row, (w, mut members)) in groups.into_iter().enumerate() {
        members.sort_unstable();
        for d in 0..dim {
            let s = stats::sum(members.iter().map(|&(ri, wi)| runs[ri].predictions[(wi, d)]));
            atlas[(row, d)] = s / members.len() as f64;
        }
        word_ids.push(w);
        counts.push(members.len());
    }
    Ok(WordAtlas { word_ids, atlas, counts, provenance, dropped_windows: dropped })
}

/// Equal-weight mean over atlases for words present in at least half of them.
pub fn average_atlases(atlases: &[WordAtlas]) -> Result<WordAtlas> {
    let first = atlases.first().ok_or_else(|| Error::invalid("average_atlases: no atlases"))?;
    let dim = first.state_dim();
    if atlases.iter().any(|a| a.state_dim() != dim) {
        return Err(Error::invalid("average_atlases: mismatched state_dim"));
    }
    let mut presence: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for (ai, a) in atlases.iter().enumerate() {
        for (row, &w) in a.word_ids.iter().enumerate() {
            presence.entry(w).or_default().push((ai, row));
        }
    }
    let m = atlases.len();
    let kept: Vec<(u32, Vec<(usize, usize)>)> = presence.into_iter().filter(|(_, v)| 2 * v.len() >= m).collect();
    let mut atlas = DMatrix::zeros(kept.len(), dim);
    let mut counts = Vec::with_capacity(kept.len());
    for (row, (_, members)) in kept.iter().enumerate() {
        for d in 0..dim {
            let s = stats::sum(members.iter().map(|&(ai, r)| atlases[ai].atlas[(r, d)]));
            atlas[(row, d)] = s / members.len() as f64;
        }
        counts.push(members.iter().map(|&(ai, r)| atlases[ai].counts[r]).sum());
    }
    let mut subjects: Vec<String> = atlases.iter().flat_map(|a| a.provenance.subjects.clone()).collect();
    subjects.dedup();
    Ok(WordAtlas {
        word_ids: kept.iter().map(|(w, _)| *w).collect(),
        atlas,
        counts,
        provenance: Provenance { kind: "average".into(), subjects },
        dropped_windows: atlases.iter().map(|a| a.dropped_windows).sum(),
    })
}

/// Restrict an atlas to the given (sorted) word ids.
pub fn restrict(atlas: &WordAtlas, word_ids: &[u32]) -> WordAtlas {
    let rows: Vec<usize> = word_ids.iter().filter_map(|&w| atlas.row_of(w)).collect();
    WordAtlas {
        word_ids: rows.iter().map(|&r| atlas.word_ids[r]).collect(),
        atlas: select_rows(&atlas.atlas, &rows),
        counts: rows.iter().map(|&r| atlas.counts[r]).collect(),
        provenance: atlas.provenance.clone(),
        dropped_windows: atlas.dropped_windows,
    }
}

// ---------------------------------------------------------------------------
// Split-half reliability
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAxis {
    /// Axis index in the odd-half fit.
    pub axis: usize,
    /// |r| of odd-fit axis scores between the odd and even atlases.
    pub odd_to_even: f64,
    /// Same for the matched even-fit axis.
    pub even_to_odd: f64,
    pub mean: f64,
    /// Half the absolute difference of the two directions.
    pub spread: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitReport {
    pub axes: Vec<SplitAxis>,
    pub n_shared_words: usize,
    /// Odd-half axes (a) paired with even-half axes (b) by word scores.
    pub odd_even_matching: AxisMatching,
}

/// Odd/even subject split-half replication of axes.
///
/// Axes fit on one half's average atlas score the words of both halves; the
/// per-axis |r| between the two score vectors over shared words measures
/// replication. Odd and even axes are paired by matching their word scores.
pub fn split_half<F>(atlases: &[WordAtlas], axis_fit: F) -> Result<SplitReport>
where
    F: Fn(&WordAtlas) -> Result<AxisBasis>,
{
    if atlases.len() < 4 {
        return Err(Error::invalid("split_half needs at least 4 atlases (2 per half)"));
    }
    let odd: Vec<WordAtlas> = atlases.iter().step_by(2).cloned().collect();
    let even: Vec<WordAtlas> = atlases.iter().skip(1).step_by(2).cloned().collect();
    let a_odd = average_atlases(&odd)?;
    let a_even = average_atlases(&even)?;
    let shared: Vec<u32> = a_odd.word_ids.iter().copied().filter(|w| a_even.row_of(*w).is_some()).collect();
    let a_odd = restrict(&a_odd, &shared);
    let a_even = restrict(&a_even, &shared);
    let fit_odd = axis_fit(&a_odd)?;
    let fit_even = axis_fit(&a_even)?;

    let replication = |fit: &AxisBasis, own: &WordAtlas, other: &WordAtlas| -> Vec<f64> {
        let s_own = fit.transform(&own.atlas);
        let s_other = fit.transform(&other.atlas);
        (0..fit.n_axes())
            .map(|i| {
                stats::pearson(s_own.column(i).as_slice(), s_other.column(i).as_slice())
                    .map_or(0.0, f64::abs)
            })
            .collect()
    };
    let r_odd = replication(&fit_odd, &a_odd, &a_even);
    let r_even = replication(&fit_even, &a_even, &a_odd);
    let matching = match_axes(&fit_odd.transform(&a_odd.atlas), &fit_even.transform(&a_even.atlas))?;

    let axes = matching
        .pairs
        .iter()
        .map(|p| {
            let (r1, r2) = (r_odd[p.a], r_even[p.b]);
            SplitAxis {
                axis: p.a,
                odd_to_even: r1,
                even_to_odd: r2,
                mean: 0.5 * (r1 + r2),
                spread: 0.5 * (r1 - r2).abs(),
            }
        })
        .collect();
    Ok(SplitReport { axes, n_shared_words: shared.len(), odd_even_matching: matching })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ev(onset: f64, word_id: u32, lf: f64, pos: u8, emb: f64) -> WordEvent {
        WordEvent {
            onset,
            offset: onset + 0.1,
            word_id,
            token: format!("w{word_id}"),
            logfreq: lf,
            pos_id: pos,
            emb_change: emb,
        }
    }

    fn random_events(n: usize, seed: u64) -> Vec<WordEvent> {
        let mut r = rng(seed);
        let mut t = 0.0;
        (0..n)
            .map(|_| {
                t += r.random_range(0.1..1.0);
                ev(t, r.random_range(0..20), -r.random_range(1.0..6.0), r.random_range(0..8), r.random::<f64>())
            })
            .collect()
    }

    #[test]
    fn single_word_fills_every_lag() {
        let events = vec![ev(0.0, 3, -2.0, 4, 0.7), ev(5.0, 1, -4.0, 2, 0.1)];
        let times = [1.0, 6.0];
        let d = build_design(&[RunWindows { events: &events, window_times: &times }], &DEFAULT_LAGS, &[0, 1, 2]).unwrap();
        assert_eq!(d.missing_per_lag, vec![0, 0, 0]);
        // two rows, two distinct words: standardized values are ±1 in every column
        for c in 0..9 {
            assert!((d.x[(0, c)].abs() - 1.0).abs() < 1e-12);
            assert_eq!(d.x[(0, c)].signum(), d.x[(0, c % 3)].signum());
        }
    }

    #[test]
    fn missing_lag_is_zero_and_counted() {
        let events = vec![ev(0.0, 3, -2.0, 4, 0.7), ev(0.2, 5, -3.0, 1, 0.2)];
        let times = [0.3, 2.0, 3.0];
        let d = build_design(&[RunWindows { events: &events, window_times: &times }], &DEFAULT_LAGS, &[0, 1, 2]).unwrap();
        // t = 0.3 has no word at or before t − 0.5 or t − 1.0
        assert_eq!(d.missing_per_lag, vec![0, 1, 1]);
        for c in 3..9 {
            assert_eq!(d.x[(0, c)], 0.0);
        }
        assert!(build_design(&[RunWindows { events: &[], window_times: &times }], &DEFAULT_LAGS, &[0]).is_err());
    }

    #[test]
    fn design_matches_quadratic_scan() {
        let events = random_events(200, 1);
        let times: Vec<f64> = (0..150).map(|i| i as f64 * 0.5).collect();
        let feats = [0, 1, 2];
        let d = build_design(&[RunWindows { events: &events, window_times: &times }], &DEFAULT_LAGS, &feats).unwrap();
        for (row, &t) in times.iter().enumerate() {
            for (li, &lag) in DEFAULT_LAGS.iter().enumerate() {
                // O(n) scan for the latest onset at or before t - lag
                let mut best: Option<&WordEvent> = None;
                for e in &events {
                    if e.onset <= t - lag && best.is_none_or(|b| e.onset >= b.onset) {
                        best = Some(e);
                    }
                }
                for (fi, &f) in feats.iter().enumerate() {
                    let c = li * 3 + fi;
                    let want = best.map_or(0.0, |e| (e.feature(f) - d.means[c]) / d.sds[c]);
                    assert_eq!(d.x[(row, c)], want);
                }
            }
        }
    }

    fn planted_runs(n_runs: usize, seed: u64) -> (Vec<Vec<WordEvent>>, Vec<Vec<f64>>) {
        let events: Vec<Vec<WordEvent>> = (0..n_runs).map(|r| random_events(300, seed + r as u64)).collect();
        let times: Vec<Vec<f64>> = (0..n_runs).map(|_| (0..200).map(|i| 2.0 + i as f64 * 0.5).collect()).collect();
        (events, times)
    }

    #[test]
    fn recovers_planted_linear_weights() {
        let (events, times) = planted_runs(5, 10);
        let runs: Vec<RunWindows> = events.iter().zip(&times).map(|(e, t)| RunWindows { events: e, window_times: t }).collect();
        let d = build_design(&runs, &DEFAULT_LAGS, &[0, 1, 2]).unwrap();
        assert_eq!(d.missing_per_lag, vec![0, 0, 0]);
        let mut r = rng(3);
        let w_true = DMatrix::from_fn(9, 4, |_, _| StandardNormal.sample(&mut r));
        let b_true = DVector::from_fn(4, |i, _| i as f64);
        // raw features rebuilt from the standardized design
        let mut raw = d.x.clone();
        for c in 0..9 {
            let (m, s) = (d.means[c], d.sds[c]);
            raw.column_mut(c).apply(|v| *v = *v * s + m);
        }
        let mut y = &raw * &w_true;
        for mut row in y.row_iter_mut() {
            row += b_true.transpose();
        }
        let (model, _) = fit_state_model(&d, &y, &[1e-9], 5).unwrap();
        let (w, b) = model.raw_weights(&d);
        assert!((&w - &w_true).amax() < 1e-4);
        assert!((&b - &b_true).amax() < 1e-4);
    }

    #[test]
    fn pure_noise_has_no_held_out_skill() {
        let (events, times) = planted_runs(5, 20);
        let runs: Vec<RunWindows> = events.iter().zip(&times).map(|(e, t)| RunWindows { events: e, window_times: t }).collect();
        let d = build_design(&runs, &DEFAULT_LAGS, &[0, 1, 2]).unwrap();
        let mut r = rng(4);
        let y = DMatrix::from_fn(d.x.nrows(), 6, |_, _| StandardNormal.sample(&mut r));
        let (model, _) = fit_state_model(&d, &y, &default_alphas(), 5).unwrap();
        let best = model.cv_table.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        assert!(best <= 0.05, "held-out R² {best}");
    }

    #[test]
    fn leave_one_run_out_covers_every_window_once() {
        let (events, times) = planted_runs(4, 30);
        let runs: Vec<RunWindows> = events.iter().zip(&times).map(|(e, t)| RunWindows { events: e, window_times: t }).collect();
        let d = build_design(&runs, &DEFAULT_LAGS, &[0, 1, 2]).unwrap();
        assert_eq!(run_folds(4, 4), vec![0, 1, 2, 3]);
        let mut r = rng(5);
        let y = DMatrix::from_fn(d.x.nrows(), 2, |_, _| StandardNormal.sample(&mut r));
        let (model, oof) = fit_state_model(&d, &y, &[1.0], 4).unwrap();
        assert_eq!(oof.nrows(), d.x.nrows());
        // OOF row equals the prediction of a model refit without that run
        let test: Vec<usize> = (0..d.x.nrows()).filter(|&i| d.run_of_row[i] == 2).collect();
        let train: Vec<usize> = (0..d.x.nrows()).filter(|&i| d.run_of_row[i] != 2).collect();
        let fit = stats::ridge_solve(&select_rows(&d.x, &train), &select_rows(&y, &train), model.alpha, false).unwrap();
        let pred = fit.predict(&select_rows(&d.x, &test));
        for (k, &i) in test.iter().enumerate() {
            for j in 0..2 {
                assert!((pred[(k, j)] - oof[(i, j)]).abs() < 1e-12);
            }
        }
        assert!(fit_state_model(&d, &y, &[1.0], 5).is_err());
    }

    #[test]
    fn atlas_group_means() {
        let events = vec![ev(0.0, 7, -1.0, 0, 0.0), ev(3.0, 9, -2.0, 0, 0.0)];
        let times = [0.5, 1.0, 2.0, 3.0, 3.5, 4.0, 4.5, 5.0];
        let preds = DMatrix::from_fn(8, 2, |i, j| (i * 10 + j) as f64);
        let prov = Provenance { kind: "oof".into(), subjects: vec!["s".into()] };
        let a = build_word_atlas(&[RunPredictions { predictions: &preds, events: &events, window_times: &times }], prov.clone()).unwrap();
        assert_eq!(a.word_ids, vec![7, 9]);
        assert_eq!(a.counts, vec![3, 5]);
        assert_eq!(a.atlas[(0, 0)], (0.0 + 10.0 + 20.0) / 3.0);
        assert_eq!(a.atlas[(1, 1)], (31.0 + 41.0 + 51.0 + 61.0 + 71.0) / 5.0);
        // window before the first onset is dropped
        let late = vec![ev(1.5, 7, -1.0, 0, 0.0)];
        let b = build_word_atlas(&[RunPredictions { predictions: &preds, events: &late, window_times: &times }], prov).unwrap();
        assert_eq!(b.dropped_windows, 2);
        assert_eq!(b.counts, vec![6]);
    }

    #[test]
    fn atlas_invariant_to_event_order() {
        let events = random_events(50, 3);
        let times: Vec<f64> = (0..60).map(|i| 1.0 + i as f64 * 0.4).collect();
        let preds = DMatrix::from_fn(60, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.37);
        let prov = Provenance { kind: "oof".into(), subjects: vec![] };
        let a = build_word_atlas(&[RunPredictions { predictions: &preds, events: &events, window_times: &times }], prov.clone()).unwrap();
        let mut shuffled = events.clone();
        shuffled.reverse();
        let b = build_word_atlas(&[RunPredictions { predictions: &preds, events: &shuffled, window_times: &times }], prov).unwrap();
        assert_eq!(a, b);
    }

    fn atlas(ids: Vec<u32>, m: DMatrix<f64>) -> WordAtlas {
        let n = ids.len();
        WordAtlas {
            word_ids: ids,
            atlas: m,
            counts: vec![1; n],
            provenance: Provenance { kind: "oof".into(), subjects: vec![] },
            dropped_windows: 0,
        }
    }

    #[test]
    fn averaging_rules() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let a = atlas(vec![1, 2], v.clone());
        assert_eq!(average_atlases(std::slice::from_ref(&a)).unwrap().atlas, v);
        let b = atlas(vec![1, 2], -v.clone());
        assert!(average_atlases(&[a.clone(), b]).unwrap().atlas.iter().all(|x| *x == 0.0));
        let c = atlas(vec![1], DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 0.0]));
        assert!(average_atlases(&[a.clone(), c]).is_err());
        // word 3 appears in 1 of 3 atlases: dropped
        let d = atlas(vec![1, 3], v.clone());
        let e = average_atlases(&[a.clone(), a.clone(), d]).unwrap();
        assert_eq!(e.word_ids, vec![1, 2]);
    }

    #[test]
    fn twelve_subject_mean_matches_oracle() {
        let mut r = rng(12);
        let atlases: Vec<WordAtlas> = (0..12)
            .map(|_| atlas((0..40).collect(), DMatrix::from_fn(40, 5, |_, _| StandardNormal.sample(&mut r))))
            .collect();
        let avg = average_atlases(&atlases).unwrap();
        for i in 0..40 {
            for j in 0..5 {
                let oracle: f64 = atlases.iter().map(|a| a.atlas[(i, j)]).sum::<f64>() / 12.0;
                assert!((avg.atlas[(i, j)] - oracle).abs() < 1e-12);
            }
        }
    }

    fn ica_fit(a: &WordAtlas) -> Result<AxisBasis> {
        match crate::axes::fit_ica(a, &crate::axes::IcaConfig { n_axes: 3, seed: 2, ..Default::default() }) {
            Err(Error::IcaNotConverged { best, .. }) => Ok(*best),
            other => other,
        }
    }

    fn laplace_atlas(seed: u64, n: usize) -> WordAtlas {
        use rand::Rng;
        let mut r = rng(seed);
        let mut lap = || {
            let u: f64 = r.random::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        };
        let s = DMatrix::from_fn(n, 3, |_, _| lap());
        let mix = DMatrix::from_fn(3, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + if i == j { 3.0 } else { 0.0 });
        atlas((0..n as u32).collect(), s * mix)
    }

    #[test]
    fn split_half_identical_subjects() {
        let a = laplace_atlas(1, 200);
        let rep = split_half(&vec![a; 4], ica_fit).unwrap();
        assert_eq!(rep.axes.len(), 3);
        for ax in &rep.axes {
            assert!((ax.odd_to_even - 1.0).abs() < 1e-6 && (ax.even_to_odd - 1.0).abs() < 1e-6);
        }
        assert!(split_half(&[laplace_atlas(1, 50), laplace_atlas(2, 50), laplace_atlas(3, 50)], ica_fit).is_err());
    }

    #[test]
    fn split_half_independent_subjects_below_shuffle_null() {
        let atlases: Vec<WordAtlas> = (0..4).map(|s| laplace_atlas(100 + s, 120)).collect();
        let observed: f64 = split_half(&atlases, ica_fit).unwrap().axes.iter().map(|a| a.mean).sum::<f64>() / 3.0;
        // null: shuffle word labels of each atlas independently
        use rand::seq::SliceRandom;
        let mut null: Vec<f64> = (0..40)
            .map(|b| {
                let shuffled: Vec<WordAtlas> = atlases
                    .iter()
                    .enumerate()
                    .map(|(k, a)| {
                        let mut order: Vec<usize> = (0..a.n_words()).collect();
                        order.shuffle(&mut rng(1000 * b + k as u64));
                        atlas(a.word_ids.clone(), select_rows(&a.atlas, &order))
                    })
                    .collect();
                split_half(&shuffled, ica_fit).unwrap().axes.iter().map(|a| a.mean).sum::<f64>() / 3.0
            })
            .collect();
        null.sort_by(f64::total_cmp);
        let q95 = stats::quantile_sorted(&null, 0.95);
        assert!(observed < q95, "observed {observed} vs null 95th {q95}");
    }

    #[test]
    fn ridge_satisfies_normal_equations() {
        let (events, times) = planted_runs(3, 40);
        let runs: Vec<RunWindows> = events.iter().zip(&times).map(|(e, t)| RunWindows { events: e, window_times: t }).collect();
        let d = build_design(&runs, &DEFAULT_LAGS, &[0, 1, 2]).unwrap();
        let mut r = rng(6);
        let y = DMatrix::from_fn(d.x.nrows(), 3, |_, _| StandardNormal.sample(&mut r));
        let (m, _) = fit_state_model(&d, &y, &[10.0], 3).unwrap();
        // centred normal equations with an unpenalized intercept
        let n = d.x.nrows() as f64;
        let xm = DVector::from_fn(9, |j, _| d.x.column(j).sum() / n);
        let ym = DVector::from_fn(3, |j, _| y.column(j).sum() / n);
        let mut xc = d.x.clone();
        let mut yc = y.clone();
        for i in 0..xc.nrows() {
            let mut row = xc.row_mut(i);
            row -= xm.transpose();
            let mut row = yc.row_mut(i);
            row -= ym.transpose();
        }
        let lhs = (xc.transpose() * &xc + DMatrix::<f64>::identity(9, 9) * m.alpha) * &m.weights;
        let rhs = xc.transpose() * &yc;
        assert!((&lhs - &rhs).norm() / rhs.norm() < 1e-8);
        assert!(((&m.intercept - (ym - m.weights.transpose() * xm)).amax()) < 1e-10);
    }
}
