// SPDX-License-Identifier: MIT OR Apache-2.0

//! Statistical primitives shared by every stage: compensated moments,
//! Pearson/partial correlation, Cohen's d, permutation tests, percentile
//! bootstrap, Benjamini-Hochberg FDR, Welch's t and ridge regression.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};

// ---------------------------------------------------------------------------
// Compensated moments
// ---------------------------------------------------------------------------

/// Neumaier-compensated sum.
pub fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    sum(x.iter().copied()) / x.len() as f64
}

/// Variance with `ddof` delta degrees of freedom (two-pass, compensated).
pub fn variance(x: &[f64], ddof: usize) -> f64 {
    if x.len() <= ddof {
        return f64::NAN;
    }
    let m = mean(x);
    sum(x.iter().map(|v| (v - m) * (v - m))) / (x.len() - ddof) as f64
}

pub fn std_dev(x: &[f64], ddof: usize) -> f64 {
    variance(x, ddof).sqrt()
}

/// Sample skewness (population moments).
pub fn skewness(x: &[f64]) -> f64 {
    let m = mean(x);
    let m2 = sum(x.iter().map(|v| (v - m).powi(2))) / x.len() as f64;
    let m3 = sum(x.iter().map(|v| (v - m).powi(3))) / x.len() as f64;
    if m2 <= 0.0 {
        return 0.0;
    }
    m3 / m2.powf(1.5)
}

// ---------------------------------------------------------------------------
// Correlation
// ---------------------------------------------------------------------------

/// Plain Pearson correlation. Fails on zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "pearson: length mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson: need at least 2 points"));
    }
    let mx = mean(x);
    let my = mean(y);
    let sxy = sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let syy = sum(y.iter().map(|b| (b - my) * (b - my)));
    let scale_x = sum(x.iter().map(|a| a * a)).max(f64::MIN_POSITIVE);
    let scale_y = sum(y.iter().map(|b| b * b)).max(f64::MIN_POSITIVE);
    if sxx <= 1e-24 * scale_x || syy <= 1e-24 * scale_y || sxx == 0.0 || syy == 0.0 {
        return Err(Error::degenerate("pearson: zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&ranks(x), &ranks(y))
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// OLS residuals of `y` regressed on `confounds` (n × c) plus an intercept.
pub fn residualize(y: &[f64], confounds: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = y.len();
    if confounds.nrows() != n {
        return Err(Error::invalid("residualize: row mismatch"));
    }
    let c = confounds.ncols();
    let mut design = DMatrix::from_element(n, c + 1, 1.0);
    design.view_mut((0, 1), (n, c)).copy_from(confounds);
    let qr = design.clone().qr();
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let beta = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular("residualize: rank-deficient confounds".into()))?;
    let fitted = design * beta;
    Ok(y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect())
}

/// Pearson correlation, optionally partialling out confounds by OLS.
pub fn pearson_partial(x: &[f64], y: &[f64], confounds: Option<&DMatrix<f64>>) -> Result<f64> {
    match confounds {
        None => pearson(x, y),
        Some(c) => {
            if x.len() < 3 + c.ncols() {
                return Err(Error::invalid(format!(
                    "pearson_partial: n={} too small for {} confounds",
                    x.len(),
                    c.ncols()
                )));
            }
            let rx = residualize(x, c)?;
            let ry = residualize(y, c)?;
            // Residuals at round-off level relative to the input count as zero variance.
            let tol = 1e-10;
            if std_dev(&rx, 0) <= tol * std_dev(x, 0).max(1e-300)
                || std_dev(&ry, 0) <= tol * std_dev(y, 0).max(1e-300)
            {
                return Err(Error::degenerate(
                    "pearson_partial: zero residual variance after partialling",
                ));
            }
            pearson(&rx, &ry)
        }
    }
}

// ---------------------------------------------------------------------------
// Effect sizes and tests
// ---------------------------------------------------------------------------

/// Cohen's d with pooled standard deviation.
pub fn cohen_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("cohen_d: each sample needs at least 2 values"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * variance(a, 1) + (nb - 1.0) * variance(b, 1)) / (na + nb - 2.0)).sqrt();
    let ma = mean(a);
    let mb = mean(b);
    let scale = ma.abs().max(mb.abs()).max(1.0);
    if !(pooled > 1e-14 * scale) {
        return Err(Error::degenerate("cohen_d: zero pooled standard deviation"));
    }
    Ok((ma - mb) / pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermStat {
    MeanDiff,
    CohenD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermResult {
    pub observed: f64,
    pub p: f64,
    pub n_perm: usize,
    pub null_mean: f64,
    pub null_sd: f64,
}

fn group_stat(values: &[f64], labels: &[bool], stat: PermStat) -> Result<f64> {
    let a: Vec<f64> = values.iter().zip(labels).filter(|(_, &l)| l).map(|(v, _)| *v).collect();
    let b: Vec<f64> = values.iter().zip(labels).filter(|(_, &l)| !l).map(|(v, _)| *v).collect();
    match stat {
        PermStat::MeanDiff => {
            if a.is_empty() || b.is_empty() {
                return Err(Error::invalid("permutation: empty group"));
            }
            Ok(mean(&a) - mean(&b))
        }
        PermStat::CohenD => match cohen_d(&a, &b) {
            Ok(d) => Ok(d),
            // a shuffled group can collapse to constant values
            Err(Error::Degenerate(_)) => Ok(0.0),
            Err(e) => Err(e),
        },
    }
}

/// Two-sample permutation test with add-one smoothing, two-sided.
pub fn perm_test(a: &[f64], b: &[f64], stat: PermStat, n_perm: usize, seed: u64) -> Result<PermResult> {
    let values: Vec<f64> = a.iter().chain(b).copied().collect();
    let labels: Vec<bool> = std::iter::repeat(true)
        .take(a.len())
        .chain(std::iter::repeat(false).take(b.len()))
        .collect();
    let blocks = vec![0usize; values.len()];
    perm_test_blocked(&values, &labels, &blocks, stat, n_perm, seed)
}

/// Permutation test where group labels are shuffled only within blocks.
///
/// `labels[i] == true` marks membership in the first group. Each block keeps
/// its own count of first-group labels under every permutation.
pub fn perm_test_blocked(
    values: &[f64],
    labels: &[bool],
    blocks: &[usize],
    stat: PermStat,
    n_perm: usize,
    seed: u64,
) -> Result<PermResult> {
    if n_perm < 100 {
        return Err(Error::invalid("permutation test needs n_perm >= 100"));
    }
    if values.len() != labels.len() || values.len() != blocks.len() {
        return Err(Error::invalid("permutation test: length mismatch"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("permutation test: non-finite value"));
    }
    let observed = group_stat(values, labels, stat)?;

    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &b) in blocks.iter().enumerate() {
        groups.entry(b).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();

    let null: Vec<f64> = (0..n_perm)
        .into_par_iter()
        .map(|k| {
            let mut r = rng(derive_seed(seed, k as u64));
            let mut perm = labels.to_vec();
            for g in &groups {
                let mut lab: Vec<bool> = g.iter().map(|&i| labels[i]).collect();
                lab.shuffle(&mut r);
                for (&i, l) in g.iter().zip(lab) {
                    perm[i] = l;
                }
            }
            group_stat(values, &perm, stat)
        })
        .collect::<Result<Vec<f64>>>()?;

    let thr = observed.abs() * (1.0 - 1e-12);
    let exceed = null.iter().filter(|t| t.abs() >= thr).count();
    Ok(PermResult {
        observed,
        p: (1 + exceed) as f64 / (1 + n_perm) as f64,
        n_perm,
        null_mean: mean(&null),
        null_sd: std_dev(&null, 1),
    })
}

/// Permutation test for Pearson r: `y` is shuffled, two-sided on |r|.
pub fn perm_test_corr(x: &[f64], y: &[f64], n_perm: usize, seed: u64) -> Result<PermResult> {
    if n_perm < 100 {
        return Err(Error::invalid("permutation test needs n_perm >= 100"));
    }
    let observed = pearson(x, y)?;
    let null: Vec<f64> = (0..n_perm)
        .into_par_iter()
        .map(|k| {
            let mut r = rng(derive_seed(seed, k as u64));
            let mut ys = y.to_vec();
            ys.shuffle(&mut r);
            pearson(x, &ys)
        })
        .collect::<Result<Vec<f64>>>()?;
    let thr = observed.abs() * (1.0 - 1e-12);
    let exceed = null.iter().filter(|t| t.abs() >= thr).count();
    Ok(PermResult {
        observed,
        p: (1 + exceed) as f64 / (1 + n_perm) as f64,
        n_perm,
        null_mean: mean(&null),
        null_sd: std_dev(&null, 1),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WelchT {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Welch's unequal-variance t-test, two-sided.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchT> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("welch_t: each sample needs at least 2 values"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a, 1) / na, variance(b, 1) / nb);
    let se2 = va + vb;
    if !(se2 > 0.0) {
        return Err(Error::degenerate("welch_t: zero variance"));
    }
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::degenerate(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(WelchT { t, df, p })
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootStat {
    /// Pearson r of paired (x, y).
    Pearson,
    /// Cohen's d of sample x versus sample y (each resampled independently).
    CohenD,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    pub level: f64,
    pub n_boot: usize,
    /// Resamples redrawn because the statistic was undefined.
    pub redraws: usize,
    /// The interval has zero width.
    pub degenerate: bool,
}

/// Percentile bootstrap confidence interval.
pub fn bootstrap_ci(x: &[f64], y: &[f64], stat: BootStat, n_boot: usize, level: f64, seed: u64) -> Result<BootstrapCi> {
    if n_boot < 200 {
        return Err(Error::invalid("bootstrap needs n_boot >= 200"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::invalid("bootstrap level must lie in (0, 1)"));
    }
    if stat == BootStat::Pearson && x.len() != y.len() {
        return Err(Error::invalid("bootstrap: paired samples differ in length"));
    }
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::invalid("bootstrap: samples too small"));
    }
    let max_redraws = n_boot / 10;
    let draws: Vec<(f64, usize)> = (0..n_boot)
        .into_par_iter()
        .map(|k| {
            let mut r = rng(derive_seed(seed, k as u64));
            let mut redraws = 0usize;
            loop {
                let v = match stat {
                    BootStat::Pearson => {
                        let idx: Vec<usize> = (0..x.len()).map(|_| r.random_range(0..x.len())).collect();
                        let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
                        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                        pearson(&xs, &ys)
                    }
                    BootStat::CohenD => {
                        let xs: Vec<f64> = (0..x.len()).map(|_| x[r.random_range(0..x.len())]).collect();
                        let ys: Vec<f64> = (0..y.len()).map(|_| y[r.random_range(0..y.len())]).collect();
                        cohen_d(&xs, &ys)
                    }
                };
                match v {
                    Ok(v) => return (v, redraws),
                    Err(_) if redraws <= max_redraws => redraws += 1,
                    Err(_) => return (f64::NAN, redraws),
                }
            }
        })
        .collect();
    let redraws: usize = draws.iter().map(|d| d.1).sum();
    if redraws > max_redraws || draws.iter().any(|d| d.0.is_nan()) {
        return Err(Error::degenerate(format!(
            "bootstrap: {redraws} degenerate resamples exceed 10% of {n_boot}"
        )));
    }
    let mut vals: Vec<f64> = draws.into_iter().map(|d| d.0).collect();
    vals.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let low = quantile_sorted(&vals, alpha);
    let high = quantile_sorted(&vals, 1.0 - alpha);
    Ok(BootstrapCi {
        low,
        high,
        level,
        n_boot,
        redraws,
        degenerate: (high - low).abs() <= 1e-12 * low.abs().max(1.0),
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

// ---------------------------------------------------------------------------
// Multiple comparisons
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdrResult {
    pub q: f64,
    pub rejected: Vec<bool>,
    /// BH-adjusted p-values in input order.
    pub adjusted: Vec<f64>,
    /// Largest rejected p-value, if any.
    pub threshold: Option<f64>,
}

/// Benjamini-Hochberg step-up procedure.
pub fn bh_fdr(pvals: &[f64], q: f64) -> Result<FdrResult> {
    if let Some(p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("bh_fdr: p-value {p} outside [0, 1]")));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]).then(a.cmp(&b)));
    let mut k_star = 0;
    for (rank, &i) in order.iter().enumerate() {
        if pvals[i] <= (rank + 1) as f64 * q / m as f64 {
            k_star = rank + 1;
        }
    }
    let mut rejected = vec![false; m];
    let threshold = if k_star > 0 {
        let thr = pvals[order[k_star - 1]];
        for (r, p) in rejected.iter_mut().zip(pvals) {
            *r = *p <= thr;
        }
        Some(thr)
    } else {
        None
    };
    let mut adjusted = vec![1.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(pvals[i] * m as f64 / (rank + 1) as f64);
        adjusted[i] = running;
    }
    Ok(FdrResult { q, rejected, adjusted, threshold })
}

// ---------------------------------------------------------------------------
// Goodness of fit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct KsResult {
    pub statistic: f64,
    pub p: f64,
}

/// One-sample Kolmogorov-Smirnov test against Uniform(0, 1).
pub fn ks_uniform(samples: &[f64]) -> KsResult {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, &v) in s.iter().enumerate() {
        let v = v.clamp(0.0, 1.0);
        d = d.max((i + 1) as f64 / n - v).max(v - i as f64 / n);
    }
    // Asymptotic Kolmogorov distribution with the Stephens small-sample correction.
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        p += 2.0 * (-1.0f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp();
    }
    KsResult {
        statistic: d,
        p: p.clamp(0.0, 1.0),
    }
}

// ---------------------------------------------------------------------------
// Ridge regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RidgeFit {
    /// (n_features × n_targets), in the raw feature scale.
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
}

impl RidgeFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.intercept.transpose();
        }
        out
    }
}

/// Column means and (population) standard deviations; constant columns get sd 1.
pub fn column_moments(x: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let p = x.ncols();
    let mut means = DVector::zeros(p);
    let mut sds = DVector::zeros(p);
    for j in 0..p {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        means[j] = mean(&col);
        let sd = std_dev(&col, 0);
        sds[j] = if sd > 1e-12 * means[j].abs().max(1.0) { sd } else { 1.0 };
    }
    (means, sds)
}

/// Ridge regression with an unpenalized intercept:
/// minimizes ‖Y − XW − 1bᵀ‖² + α‖W‖².
///
/// With `standardize`, the penalty applies to weights on z-scored columns and
/// the returned weights are mapped back to the raw scale.
pub fn ridge_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, alpha: f64, standardize: bool) -> Result<RidgeFit> {
    let (n, p) = x.shape();
    if y.nrows() != n {
        return Err(Error::invalid(format!("ridge: X has {n} rows, Y has {}", y.nrows())));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid("ridge: alpha must be finite and >= 0"));
    }
    if n == 0 {
        return Err(Error::invalid("ridge: empty design"));
    }
    let (xm, xs) = column_moments(x);
    let xs = if standardize { xs } else { DVector::from_element(p, 1.0) };
    let mut xc = x.clone();
    for j in 0..p {
        let (m, s) = (xm[j], xs[j]);
        xc.column_mut(j).apply(|v| *v = (*v - m) / s);
    }
    let ym: DVector<f64> = DVector::from_iterator(
        y.ncols(),
        (0..y.ncols()).map(|j| mean(y.column(j).as_slice())),
    );
    let mut yc = y.clone();
    for j in 0..y.ncols() {
        let m = ym[j];
        yc.column_mut(j).apply(|v| *v -= m);
    }
    let mut gram = xc.transpose() * &xc;
    for i in 0..p {
        gram[(i, i)] += alpha;
    }
    let rhs = xc.transpose() * &yc;
    let w_std = solve_spd(gram, &rhs)?;
    let mut weights = w_std;
    for i in 0..p {
        let s = xs[i];
        weights.row_mut(i).apply(|v| *v /= s);
    }
    let intercept = &ym - weights.transpose() * &xm;
    Ok(RidgeFit { weights, intercept })
}

/// Solve a symmetric positive (semi)definite system, failing if singular.
pub fn solve_spd(a: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Singular("system matrix is not positive definite".into()))?;
    let l = chol.l_dirty();
    let min_piv = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if n > 0 && min_piv <= 1e-13 * max_diag.max(f64::MIN_POSITIVE) {
        return Err(Error::Singular(format!(
            "system is numerically singular (pivot ratio {:.2e})",
            min_piv / max_diag
        )));
    }
    Ok(chol.solve(rhs))
}

/// Logarithmically spaced grid from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Coefficient of determination pooled over all target columns.
pub fn r_squared(y: &DMatrix<f64>, pred: &DMatrix<f64>) -> f64 {
    let mut sse = Vec::with_capacity(y.len());
    let mut sst = Vec::with_capacity(y.len());
    for j in 0..y.ncols() {
        let m = mean(y.column(j).as_slice());
        for i in 0..y.nrows() {
            sse.push((y[(i, j)] - pred[(i, j)]).powi(2));
            sst.push((y[(i, j)] - m).powi(2));
        }
    }
    let sst = sum(sst);
    if sst <= 0.0 {
        return 0.0;
    }
    1.0 - sum(sse) / sst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
    }

    #[test]
    fn cohen_d_hand_example() {
        let d = cohen_d(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        assert_eq!(cohen_d(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(cohen_d(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cohen_d_large_sample_unit_shift() {
        let a: Vec<f64> = normals(20_000, 1).iter().map(|v| v + 1.0).collect();
        let b = normals(20_000, 2);
        let d = cohen_d(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 0.05, "d = {d}");
    }

    #[test]
    fn bh_hand_example() {
        let r = bh_fdr(&[0.001, 0.02, 0.03, 0.5], 0.05).unwrap();
        assert_eq!(r.rejected, vec![true, true, true, false]);
        assert_eq!(r.threshold, Some(0.03));
        // adjusted: min over ranks >= i of p·m/rank
        let want = [0.004, 0.04, 0.04, 0.5];
        for (a, w) in r.adjusted.iter().zip(want) {
            assert!((a - w).abs() < 1e-15);
        }
        assert!(bh_fdr(&[1.0; 5], 0.05).unwrap().rejected.iter().all(|r| !r));
        assert!(bh_fdr(&[0.0; 5], 0.05).unwrap().rejected.iter().all(|r| *r));
        assert!(bh_fdr(&[1.5], 0.05).is_err());
    }

    #[test]
    fn perm_identical_samples_give_one() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let r = perm_test(&a, &a, PermStat::MeanDiff, 200, 3).unwrap();
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn perm_extreme_separation_hits_floor() {
        let a: Vec<f64> = (0..20).map(|i| 100.0 + i as f64).collect();
        let b: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let r = perm_test(&a, &b, PermStat::CohenD, 1000, 9).unwrap();
        assert_eq!(r.p, 1.0 / 1001.0);
        assert!(perm_test(&a, &b, PermStat::CohenD, 99, 9).is_err());
    }

    #[test]
    fn blocked_permutation_preserves_block_counts() {
        // Values equal to block index: any within-block shuffle leaves the
        // statistic unchanged, so p must be 1.
        let values = [0.0, 0.0, 1.0, 1.0, 2.0, 2.0];
        let labels = [true, false, true, false, true, false];
        let blocks = [0, 0, 1, 1, 2, 2];
        let r = perm_test_blocked(&values, &labels, &blocks, PermStat::MeanDiff, 100, 1).unwrap();
        assert_eq!(r.observed, 0.0);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.null_sd, 0.0);
    }

    #[test]
    fn welch_matches_known_value() {
        // Reference from scipy.stats.ttest_ind(equal_var=False).
        let a = [27.5, 21.0, 19.0, 23.6, 17.0, 17.9, 16.9, 20.1, 21.9, 22.6, 23.1, 19.6, 19.0, 21.7, 21.4];
        let b = [27.1, 22.0, 20.8, 23.4, 23.4, 23.5, 25.8, 22.0, 24.8, 20.2, 21.9, 22.1, 22.9, 20.5, 24.4];
        let w = welch_t(&a, &b).unwrap();
        assert!((w.t - (-2.46)).abs() < 0.01, "t = {}", w.t);
        assert!((w.p - 0.021).abs() < 0.002, "p = {}", w.p);
    }

    #[test]
    fn pearson_affine_and_partial() {
        let x = normals(100, 4);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let c = DMatrix::from_column_slice(100, 1, &x);
        assert!(matches!(pearson_partial(&x, &x, Some(&c)), Err(Error::Degenerate(_))));
        assert!(pearson(&x, &[1.0; 100]).is_err());
    }

    #[test]
    fn partial_correlation_recovers_planted_link() {
        // x = c + u, y = c + v with corr(u, v) = 0.3: partial r given c is 0.3.
        let n = 2000;
        let c = normals(n, 10);
        let u = normals(n, 11);
        let e = normals(n, 12);
        let rho: f64 = 0.3;
        let v: Vec<f64> = u.iter().zip(&e).map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b).collect();
        let x: Vec<f64> = c.iter().zip(&u).map(|(a, b)| a + b).collect();
        let y: Vec<f64> = c.iter().zip(&v).map(|(a, b)| a + b).collect();
        let cm = DMatrix::from_column_slice(n, 1, &c);
        let r = pearson_partial(&x, &y, Some(&cm)).unwrap();
        assert!((r - 0.3).abs() < 0.05, "partial r = {r}");
    }

    #[test]
    fn bootstrap_identity_is_degenerate() {
        let x = normals(50, 5);
        let ci = bootstrap_ci(&x, &x, BootStat::Pearson, 200, 0.95, 1).unwrap();
        assert!(ci.degenerate);
        assert!((ci.low - 1.0).abs() < 1e-12 && (ci.high - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_coverage_of_zero() {
        let mut covered = 0;
        for rep in 0..100u64 {
            let x = normals(1000, 1000 + rep);
            let y = normals(1000, 5000 + rep);
            let ci = bootstrap_ci(&x, &y, BootStat::Pearson, 200, 0.95, rep).unwrap();
            if ci.low <= 0.0 && 0.0 <= ci.high {
                covered += 1;
            }
        }
        assert!(covered >= 90, "coverage {covered}/100");
    }

    #[test]
    fn ridge_alpha_zero_is_ols() {
        let n = 60;
        let x = DMatrix::from_fn(n, 3, |i, j| ((i * 7 + j * 13) % 17) as f64 + (i as f64 * 0.1).sin() * (j + 1) as f64);
        let y = DMatrix::from_fn(n, 2, |i, j| (i as f64 * 0.3).cos() + j as f64);
        let fit = ridge_solve(&x, &y, 0.0, false).unwrap();
        // OLS oracle via QR on the augmented design.
        let mut aug = DMatrix::from_element(n, 4, 1.0);
        aug.view_mut((0, 1), (n, 3)).copy_from(&x);
        let beta = aug.clone().svd(true, true).solve(&y, 1e-14).unwrap();
        for j in 0..2 {
            assert!((fit.intercept[j] - beta[(0, j)]).abs() < 1e-8);
            for i in 0..3 {
                assert!((fit.weights[(i, j)] - beta[(i + 1, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn ridge_infinite_shrinkage() {
        let x = DMatrix::from_fn(40, 3, |i, j| ((i + 1) * (j + 2)) as f64 % 7.0);
        let y = DMatrix::from_fn(40, 2, |i, j| i as f64 * 0.5 + j as f64);
        let fit = ridge_solve(&x, &y, 1e12, false).unwrap();
        assert!(fit.weights.amax() < 1e-6);
        for j in 0..2 {
            assert!((fit.intercept[j] - mean(y.column(j).as_slice())).abs() < 1e-6);
        }
    }

    #[test]
    fn ridge_singular_at_zero_alpha() {
        let x = DMatrix::from_fn(20, 2, |i, _| i as f64);
        let y = DMatrix::from_fn(20, 1, |i, _| i as f64);
        assert!(matches!(ridge_solve(&x, &y, 0.0, false), Err(Error::Singular(_))));
        assert!(ridge_solve(&x, &y, 1.0, false).is_ok());
    }

    proptest! {
        #[test]
        fn bh_monotone_in_q(p in proptest::collection::vec(0.0f64..=1.0, 1..40), q1 in 0.001f64..0.5, dq in 0.0f64..0.5) {
            let a = bh_fdr(&p, q1).unwrap();
            let b = bh_fdr(&p, q1 + dq).unwrap();
            for (ra, rb) in a.rejected.iter().zip(&b.rejected) {
                prop_assert!(!ra || *rb);
            }
        }

        #[test]
        fn cohen_d_antisymmetric_and_affine(a in proptest::collection::vec(-10.0f64..10.0, 3..20),
                                            b in proptest::collection::vec(-10.0f64..10.0, 3..20),
                                            scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            if let (Ok(d1), Ok(d2)) = (cohen_d(&a, &b), cohen_d(&b, &a)) {
                prop_assert!((d1 + d2).abs() < 1e-9);
                let at: Vec<f64> = a.iter().map(|v| v * scale + shift).collect();
                let bt: Vec<f64> = b.iter().map(|v| v * scale + shift).collect();
                let d3 = cohen_d(&at, &bt).unwrap();
                prop_assert!((d1 - d3).abs() < 1e-8 * d1.abs().max(1.0));
            }
        }

        #[test]
        fn pearson_sign_flips_under_negation(x in proptest::collection::vec(-10.0f64..10.0, 5..30), seed in 0u64..1000) {
            let y: Vec<f64> = normals(x.len(), seed);
            if let Ok(r) = pearson(&x, &y) {
                let neg: Vec<f64> = y.iter().map(|v| -3.0 * v + 1.0).collect();
                prop_assert!((pearson(&x, &neg).unwrap() + r).abs() < 1e-9);
            }
        }
    }
}
