// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent axes of the word atlas and their validation against labels.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::atlas::WordAtlas;
use crate::error::{Error, Result};
use crate::rng::{derive_path, derive_seed, rng, tag};
use crate::stats::{self, BootStat, PermStat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcaConfig {
    pub n_axes: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        IcaConfig { n_axes: 20, tol: 1e-6, max_iter: 1000, max_restarts: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBasis {
    /// (n_axes × state_dim); scores = (x − mean) · unmixingᵀ
    pub unmixing: DMatrix<f64>,
    /// (state_dim × n_axes), the right inverse of `unmixing`.
    pub mixing: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub word_ids: Vec<u32>,
    /// (n_words × n_axes), unit variance and positive skew per column.
    pub scores: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub delta: f64,
    /// Restarts used beyond the first attempt.
    pub restarts: usize,
    pub seed: u64,
}

impl AxisBasis {
    pub fn n_axes(&self) -> usize {
        self.unmixing.nrows()
    }

    /// Axis scores of arbitrary atlas rows.
    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= self.mean.transpose();
        }
        xc * self.unmixing.transpose()
    }

    pub fn axis_scores(&self, axis: usize) -> Vec<f64> {
        self.scores.column(axis).iter().copied().collect()
    }
}

/// Number of covariance eigenvalues above `1e-10 · λ_max`.
pub fn numerical_rank(x: &DMatrix<f64>) -> usize {
    let (_, cov) = centered_cov(x);
    let eig = SymmetricEigen::new(cov);
    let max = eig.eigenvalues.amax();
    if max <= 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|&&l| l > 1e-10 * max).count()
}

/// Leading components whose correlation-matrix eigenvalue exceeds the
/// `level` quantile of eigenvalues at the same rank over `n_null` atlases with
/// each column independently shuffled.
pub fn parallel_analysis_rank(x: &DMatrix<f64>, n_null: usize, level: f64, seed: u64) -> usize {
    let sorted_eig = |m: &DMatrix<f64>| {
        let (_, cov) = centered_cov(m);
        let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    };
    // standardized columns: the floor compares correlation structure, not scale
    let mut x = x.clone();
    for mut col in x.column_iter_mut() {
        let v: Vec<f64> = col.iter().copied().collect();
        let (m, sd) = (stats::mean(&v), stats::std_dev(&v, 0));
        col.apply(|e| *e = if sd > 0.0 { (*e - m) / sd } else { 0.0 });
    }
    let x = &x;
    let observed = sorted_eig(x);
    let nulls: Vec<Vec<f64>> = (0..n_null)
        .map(|b| {
            let mut r = rng(derive_seed(seed, b as u64));
            let mut xs = x.clone();
            for mut col in xs.column_iter_mut() {
                let mut v: Vec<f64> = col.iter().copied().collect();
                v.shuffle(&mut r);
                col.copy_from_slice(&v);
            }
            sorted_eig(&xs)
        })
        .collect();
    let mut rank = 0;
    for (i, &ev) in observed.iter().enumerate() {
        let mut at: Vec<f64> = nulls.iter().map(|n| n[i]).collect();
        at.sort_by(f64::total_cmp);
        if ev > stats::quantile_sorted(&at, level) {
            rank += 1;
        } else {
            break;
        }
    }
    rank
}

fn centered_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| stats::mean(c.as_slice())));
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = xc.transpose() * &xc / n;
    (mean, cov)
}

/// (W Wᵀ)^{-1/2} W
fn sym_decorrelate(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(1e-300).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose() * w
}

struct IcaRun {
    w: DMatrix<f64>,
    iterations: usize,
    delta: f64,
    converged: bool,
}

fn fastica_run(z: &DMatrix<f64>, c: usize, cfg: &IcaConfig, seed: u64) -> IcaRun {
    let n = z.nrows() as f64;
    let mut r = rng(seed);
    let w0 = DMatrix::from_fn(c, c, |_, _| StandardNormal.sample(&mut r));
    let mut w = sym_decorrelate(&w0);
    let mut delta = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let y = z * w.transpose();
        let g = y.map(f64::tanh);
        let gp_mean = DVector::from_iterator(c, g.column_iter().map(|col| 1.0 - col.iter().map(|t| t * t).sum::<f64>() / n));
        let mut w_new = g.transpose() * z / n;
        for i in 0..c {
            let s = gp_mean[i];
            let wi = w.row(i).clone_owned();
            let mut row = w_new.row_mut(i);
            row -= wi * s;
        }
        let w_new = sym_decorrelate(&w_new);
        let overlap = &w_new * w.transpose();
        delta = (0..c).map(|i| (1.0 - overlap[(i, i)].abs()).abs()).fold(0.0, f64::max);
        w = w_new;
        if delta < cfg.tol {
            return IcaRun { w, iterations: it, delta, converged: true };
        }
    }
    IcaRun { w, iterations: cfg.max_iter, delta, converged: false }
}

/// Symmetric FastICA (logcosh) on the rows of an atlas.
pub fn fit_ica(atlas: &WordAtlas, cfg: &IcaConfig) -> Result<AxisBasis> {
    fit_ica_matrix(&atlas.atlas, &atlas.word_ids, cfg)
}

/// FastICA on an (n_samples × dim) matrix.
///
/// Data are whitened onto the leading `n_axes` principal components. On
/// non-convergence the run is restarted from a new seed; when every attempt
/// fails the best iterate is returned inside [`Error::IcaNotConverged`].
pub fn fit_ica_matrix(x: &DMatrix<f64>, word_ids: &[u32], cfg: &IcaConfig) -> Result<AxisBasis> {
    let c = cfg.n_axes;
    if c == 0 {
        return Err(Error::invalid("n_axes must be positive"));
    }
    if word_ids.len() != x.nrows() {
        return Err(Error::invalid("word_ids and atlas rows differ"));
    }
    if x.nrows() <= c {
        return Err(Error::invalid(format!("ICA needs more than {c} rows, got {}", x.nrows())));
    }
    if c > x.ncols() {
        return Err(Error::invalid(format!("n_axes {c} exceeds state_dim {}", x.ncols())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("atlas contains non-finite values"));
    }
    let (mean, cov) = centered_cov(x);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]];
    let lmin = eig.eigenvalues[order[c - 1]];
    if !(lmax > 0.0) || lmin <= 1e-10 * lmax {
        return Err(Error::invalid(format!(
            "n_axes {c} exceeds the numerical rank {} of the atlas",
            numerical_rank(x)
        )));
    }
    let u = DMatrix::from_fn(x.ncols(), c, |i, j| eig.eigenvectors[(i, order[j])]);
    let lam = DVector::from_fn(c, |j, _| eig.eigenvalues[order[j]]);
    // K: whitening (c × dim)
    let k = DMatrix::from_diagonal(&lam.map(|l| 1.0 / l.sqrt())) * u.transpose();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= mean.transpose();
    }
    let z = &xc * k.transpose();

    let mut best: Option<(IcaRun, usize, u64)> = None;
    for attempt in 0..=cfg.max_restarts {
        let seed = derive_seed(cfg.seed, attempt as u64);
        let run = fastica_run(&z, c, cfg, seed);
        let better = best.as_ref().is_none_or(|(b, _, _)| run.delta < b.delta);
        let done = run.converged;
        if better {
            best = Some((run, attempt, seed));
        }
        if done {
            break;
        }
    }
    let (run, attempt, seed) = best.expect("at least one attempt");
    let mut w = run.w;
    let mut mixing = &u * DMatrix::from_diagonal(&lam.map(f64::sqrt)) * w.transpose();
    let mut scores = &z * w.transpose();
    for j in 0..c {
        let col: Vec<f64> = scores.column(j).iter().copied().collect();
        let sk = stats::skewness(&col);
        let flip = if sk.abs() > 1e-8 {
            sk < 0.0
        } else {
            let m = mixing.column(j);
            m.iter().copied().fold(0.0, |a: f64, v| if v.abs() > a.abs() { v } else { a }) < 0.0
        };
        if flip {
            w.row_mut(j).neg_mut();
            mixing.column_mut(j).neg_mut();
            scores.column_mut(j).neg_mut();
        }
    }
    let basis = AxisBasis {
        unmixing: &w * &k,
        mixing,
        mean,
        word_ids: word_ids.to_vec(),
        scores,
        converged: run.converged,
        iterations: run.iterations,
        delta: run.delta,
        restarts: attempt,
        seed,
    };
    if basis.converged {
        Ok(basis)
    } else {
        Err(Error::IcaNotConverged { restarts: cfg.max_restarts, best_delta: basis.delta, best: Box::new(basis) })
    }
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

/// Minimum-cost assignment of every row to a distinct column (rows ≤ cols).
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let (n, m) = (cost.nrows(), cost.ncols());
    assert!(n <= m, "hungarian: more rows than columns");
    // potentials formulation, 1-based with a virtual column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisPair {
    pub a: usize,
    pub b: usize,
    /// Signed Pearson r of the matched score columns.
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisMatching {
    pub pairs: Vec<AxisPair>,
    pub n_shared: usize,
    /// Full |r| matrix (axes of a × axes of b).
    pub abs_r: DMatrix<f64>,
}

impl AxisMatching {
    pub fn partner_of_a(&self, a: usize) -> Option<&AxisPair> {
        self.pairs.iter().find(|p| p.a == a)
    }

    pub fn partner_of_b(&self, b: usize) -> Option<&AxisPair> {
        self.pairs.iter().find(|p| p.b == b)
    }
}

pub const MIN_SHARED_WORDS: usize = 30;

/// Match axes of two score matrices over the same rows, minimizing Σ(1 − |r|).
pub fn match_axes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<AxisMatching> {
    if a.nrows() != b.nrows() {
        return Err(Error::invalid("match_axes: score matrices differ in rows"));
    }
    if a.nrows() < MIN_SHARED_WORDS {
        return Err(Error::invalid(format!(
            "match_axes needs at least {MIN_SHARED_WORDS} shared words, got {}",
            a.nrows()
        )));
    }
    let r = DMatrix::from_fn(a.ncols(), b.ncols(), |i, j| {
        stats::pearson(a.column(i).as_slice(), b.column(j).as_slice()).unwrap_or(0.0)
    });
    let abs_r = r.map(f64::abs);
    let cost = abs_r.map(|v| 1.0 - v);
    let pairs = if a.ncols() <= b.ncols() {
        hungarian(&cost)
            .into_iter()
            .enumerate()
            .map(|(i, j)| AxisPair { a: i, b: j, r: r[(i, j)] })
            .collect()
    } else {
        let mut p: Vec<AxisPair> = hungarian(&cost.transpose())
            .into_iter()
            .enumerate()
            .map(|(j, i)| AxisPair { a: i, b: j, r: r[(i, j)] })
            .collect();
        p.sort_by_key(|x| x.a);
        p
    };
    Ok(AxisMatching { pairs, n_shared: a.nrows(), abs_r })
}

/// Match two bases over their shared word ids.
pub fn match_bases(a: &AxisBasis, b: &AxisBasis) -> Result<AxisMatching> {
    let (ra, rb) = shared_rows(&a.word_ids, &b.word_ids);
    let sa = DMatrix::from_fn(ra.len(), a.n_axes(), |i, j| a.scores[(ra[i], j)]);
    let sb = DMatrix::from_fn(rb.len(), b.n_axes(), |i, j| b.scores[(rb[i], j)]);
    match_axes(&sa, &sb)
}

/// Row indices of the word ids present in both (sorted) lists.
pub fn shared_rows(a: &[u32], b: &[u32]) -> (Vec<usize>, Vec<usize>) {
    let mut ra = Vec::new();
    let mut rb = Vec::new();
    for (i, w) in a.iter().enumerate() {
        if let Ok(j) = b.binary_search(w) {
            ra.push(i);
            rb.push(j);
        }
    }
    (ra, rb)
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelValues {
    Continuous(Vec<f64>),
    Binary(Vec<bool>),
}

impl LabelValues {
    pub fn len(&self) -> usize {
        match self {
            LabelValues::Continuous(v) => v.len(),
            LabelValues::Binary(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelColumn {
    pub name: String,
    pub values: LabelValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub n_perm: usize,
    pub n_boot: usize,
    pub level: f64,
    /// Matching caliper in pooled-SD units of the standardized confounds.
    pub caliper: f64,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig { n_perm: 1000, n_boot: 1000, level: 0.95, caliper: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    R,
    D,
    ResidualD,
    MatchedD,
}

impl Statistic {
    pub fn as_str(self) -> &'static str {
        match self {
            Statistic::R => "r",
            Statistic::D => "d",
            Statistic::ResidualD => "residual_d",
            Statistic::MatchedD => "matched_d",
        }
    }

    /// The uncontrolled statistic of a label, used for FDR control.
    pub fn is_primary(self) -> bool {
        matches!(self, Statistic::R | Statistic::D)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub axis: usize,
    pub label: String,
    pub statistic: Statistic,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub perm_p: f64,
    /// BH q-value across the primary rows of a table.
    pub q: Option<f64>,
    pub n: usize,
    /// Items left out (unmatched under the caliper).
    pub dropped: usize,
}

fn split(values: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let a = values.iter().zip(labels).filter(|(_, &l)| l).map(|(v, _)| *v).collect();
    let b = values.iter().zip(labels).filter(|(_, &l)| !l).map(|(v, _)| *v).collect();
    (a, b)
}

/// Column-wise z-scoring with the population SD; constant columns become 0.
fn zscore_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = x.clone();
    for mut col in z.column_iter_mut() {
        let v: Vec<f64> = col.iter().copied().collect();
        let (m, s) = (stats::mean(&v), stats::std_dev(&v, 0));
        col.apply(|x| *x = if s > 0.0 { (*x - m) / s } else { 0.0 });
    }
    z
}

/// Greedy 1:1 nearest-neighbour matching of positives to negatives.
///
/// Candidate pairs are taken in order of increasing Euclidean distance on
/// z-scored confounds; pairs farther apart than `caliper` are never formed.
pub fn caliper_match(confounds: &DMatrix<f64>, labels: &[bool], caliper: f64) -> Vec<(usize, usize)> {
    let z = zscore_columns(confounds);
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for &i in &pos {
        for &j in &neg {
            let d = (z.row(i) - z.row(j)).norm();
            if d <= caliper {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = vec![false; labels.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if !used[i] && !used[j] {
            used[i] = true;
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

fn ordered_ci(est: f64, ci: &stats::BootstrapCi) -> (f64, f64) {
    (ci.low.min(est), ci.high.max(est))
}

/// Association of one axis with one label.
///
/// Continuous labels give Pearson r. Binary labels give Cohen's d and, when
/// confounds are supplied, the d of confound-residualized scores and the d
/// over caliper-matched pairs.
pub fn validate_axis(
    axis: usize,
    scores: &[f64],
    label: &LabelColumn,
    confounds: Option<&DMatrix<f64>>,
    cfg: &ValidationConfig,
) -> Result<Vec<ValidationReport>> {
    if label.values.len() != scores.len() {
        return Err(Error::invalid(format!("label '{}' length differs from scores", label.name)));
    }
    if let Some(c) = confounds {
        if c.nrows() != scores.len() {
            return Err(Error::invalid("confounds length differs from scores"));
        }
    }
    let seed_for = |s: Statistic| derive_path(cfg.seed, &[axis as u64, tag(&label.name), tag(s.as_str())]);
    let mut out = Vec::new();
    match &label.values {
        LabelValues::Continuous(y) => {
            let sd = stats::std_dev(y, 0);
            if !(sd > 0.0) {
                return Err(Error::degenerate(format!("label '{}' is constant", label.name)));
            }
            let seed = seed_for(Statistic::R);
            let perm = stats::perm_test_corr(scores, y, cfg.n_perm, seed)?;
            let ci = stats::bootstrap_ci(scores, y, BootStat::Pearson, cfg.n_boot, cfg.level, derive_seed(seed, 1))?;
            let (lo, hi) = ordered_ci(perm.observed, &ci);
            out.push(ValidationReport {
                axis,
                label: label.name.clone(),
                statistic: Statistic::R,
                estimate: perm.observed,
                ci_low: lo,
                ci_high: hi,
                perm_p: perm.p,
                q: None,
                n: scores.len(),
                dropped: 0,
            });
        }
        LabelValues::Binary(l) => {
            let n_pos = l.iter().filter(|&&b| b).count();
            if n_pos < 2 || scores.len() - n_pos < 2 {
                return Err(Error::degenerate(format!(
                    "label '{}' has a class with fewer than 2 members",
                    label.name
                )));
            }
            let mut push_d = |stat: Statistic, values: &[f64], labels: &[bool], blocks: Option<&[usize]>, dropped: usize| -> Result<()> {
                let seed = seed_for(stat);
                let perm = match blocks {
                    Some(b) => stats::perm_test_blocked(values, labels, b, PermStat::CohenD, cfg.n_perm, seed)?,
                    None => {
                        let (a, b) = split(values, labels);
                        stats::perm_test(&a, &b, PermStat::CohenD, cfg.n_perm, seed)?
                    }
                };
                let (a, b) = split(values, labels);
                let ci = stats::bootstrap_ci(&a, &b, BootStat::CohenD, cfg.n_boot, cfg.level, derive_seed(seed, 1))?;
                let (lo, hi) = ordered_ci(perm.observed, &ci);
                out.push(ValidationReport {
                    axis,
                    label: label.name.clone(),
                    statistic: stat,
                    estimate: perm.observed,
                    ci_low: lo,
                    ci_high: hi,
                    perm_p: perm.p,
                    q: None,
                    n: values.len(),
                    dropped,
                });
                Ok(())
            };
            push_d(Statistic::D, scores, l, None, 0)?;
            if let Some(c) = confounds {
                let resid = stats::residualize(scores, c)?;
                push_d(Statistic::ResidualD, &resid, l, None, 0)?;
                let pairs = caliper_match(c, l, cfg.caliper);
                if pairs.len() >= 3 {
                    let mut values = Vec::with_capacity(2 * pairs.len());
                    let mut labels = Vec::with_capacity(2 * pairs.len());
                    let mut blocks = Vec::with_capacity(2 * pairs.len());
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        values.extend([scores[i], scores[j]]);
                        labels.extend([true, false]);
                        blocks.extend([k, k]);
                    }
                    let dropped = scores.len() - 2 * pairs.len();
                    push_d(Statistic::MatchedD, &values, &labels, Some(&blocks), dropped)?;
                }
            }
        }
    }
    Ok(out)
}

/// Fill BH q-values over the primary rows of a table.
pub fn fdr_annotate(reports: &mut [ValidationReport], q: f64) -> Result<()> {
    let idx: Vec<usize> = (0..reports.len()).filter(|&i| reports[i].statistic.is_primary()).collect();
    if idx.is_empty() {
        return Ok(());
    }
    let p: Vec<f64> = idx.iter().map(|&i| reports[i].perm_p).collect();
    let fdr = stats::bh_fdr(&p, q)?;
    for (k, &i) in idx.iter().enumerate() {
        reports[i].q = Some(fdr.adjusted[k]);
    }
    Ok(())
}

/// Every axis against every label, with FDR over the primary rows.
///
/// `confounds_for(label)` returns the confound matrix for binary labels.
pub fn association_table<F>(
    basis: &AxisBasis,
    labels: &[LabelColumn],
    confounds_for: F,
    cfg: &ValidationConfig,
) -> Result<Vec<ValidationReport>>
where
    F: Fn(&str) -> Option<DMatrix<f64>>,
{
    let mut out = Vec::new();
    for axis in 0..basis.n_axes() {
        let s = basis.axis_scores(axis);
        for label in labels {
            let c = confounds_for(&label.name);
            match validate_axis(axis, &s, label, c.as_ref(), cfg) {
                Ok(r) => out.extend(r),
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    fdr_annotate(&mut out, 0.05)?;
    Ok(out)
}
