// SPDX-License-Identifier: MIT OR Apache-2.0

//! Band-limited phase extraction and sliding-window phase connectivity.
//!
//! The chain is `bandpass_filter → analytic_phase → connectivity_windows →
//! edge_pca`. Edges are channel pairs `(i, j)` with `i < j`, stored in
//! lexicographic order (see [`edge_index`]).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of channel pairs `(i, j)` with `i < j`.
pub fn edge_count(n_channels: usize) -> usize {
    n_channels * n_channels.saturating_sub(1) / 2
}

/// Lexicographic position of pair `(i, j)`, `i < j`.
pub fn edge_index(n_channels: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n_channels);
    i * (2 * n_channels - i - 1) / 2 + (j - i - 1)
}

/// All pairs in storage order.
pub fn edge_pairs(n_channels: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(edge_count(n_channels));
    for i in 0..n_channels {
        for j in i + 1..n_channels {
            out.push((i, j));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Recording
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    /// (n_channels × n_samples)
    pub samples: DMatrix<f64>,
    pub sfreq: f64,
    pub channel_names: Vec<String>,
    pub subject_id: String,
    pub run_id: String,
}

impl Recording {
    pub fn new(
        samples: DMatrix<f64>,
        sfreq: f64,
        channel_names: Vec<String>,
        subject_id: String,
        run_id: String,
    ) -> Result<Self> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("recording contains NaN or Inf"));
        }
        if channel_names.len() != samples.nrows() {
            return Err(Error::invalid("channel_names length differs from channel count"));
        }
        if !(sfreq > 0.0) {
            return Err(Error::invalid("sfreq must be positive"));
        }
        Ok(Recording { samples, sfreq, channel_names, subject_id, run_id })
    }

    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sfreq
    }
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

/// Band-pass FIR taps: Hamming-windowed sinc, `round(5 · sfreq / low)` taps
/// forced odd, cutoffs placed midway into each transition band, and the DC
/// gain projected to exactly zero.
pub fn design_bandpass(sfreq: f64, band: (f64, f64)) -> Result<Vec<f64>> {
    let (low, high) = band;
    if !(0.0 < low && low < high && high < sfreq / 2.0) {
        return Err(Error::invalid(format!(
            "band ({low}, {high}) Hz must satisfy 0 < low < high < Nyquist ({})",
            sfreq / 2.0
        )));
    }
    let mut n = (5.0 * sfreq / low).round() as usize;
    if n % 2 == 0 {
        n += 1;
    }
    let f1 = 0.75 * low / sfreq;
    let f2 = (1.25 * high).min(0.5 * (high + sfreq / 2.0)) / sfreq;
    let m = (n - 1) as f64 / 2.0;
    let sinc = |x: f64| if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    let window: Vec<f64> = (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect();
    let mut taps: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 - m;
            (2.0 * f2 * sinc(2.0 * f2 * t) - 2.0 * f1 * sinc(2.0 * f1 * t)) * window[i]
        })
        .collect();
    let dc: f64 = taps.iter().sum();
    let wsum: f64 = window.iter().sum();
    taps.iter_mut().zip(&window).for_each(|(h, w)| *h -= dc * w / wsum);
    Ok(taps)
}

/// Magnitude response of `taps` at `freq` Hz.
pub fn fir_gain(taps: &[f64], sfreq: f64, freq: f64) -> f64 {
    let w = 2.0 * PI * freq / sfreq;
    let (re, im) = taps.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, h)| {
        (re + h * (w * i as f64).cos(), im - h * (w * i as f64).sin())
    });
    (re * re + im * im).sqrt()
}

fn fft_convolve_same(x: &[f64], taps: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = x.len();
    let size = (n + taps.len() - 1).next_power_of_two();
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(size, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = taps.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(size, Complex::new(0.0, 0.0));
    let fwd = planner.plan_fft_forward(size);
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    planner.plan_fft_inverse(size).process(&mut a);
    let half = (taps.len() - 1) / 2;
    a[half..half + n].iter().map(|c| c.re / size as f64).collect()
}

/// Forward-backward FIR filter with mirror padding at both ends.
pub fn filtfilt(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let n = x.len();
    let pad = (3 * taps.len()).min(n.saturating_sub(1));
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(x[n - 1 - i]);
    }
    let mut planner = FftPlanner::new();
    let once = fft_convolve_same(&ext, taps, &mut planner);
    // symmetric taps: the backward pass is the same centered convolution
    let rev: Vec<f64> = taps.iter().rev().copied().collect();
    let twice = fft_convolve_same(&once, &rev, &mut planner);
    twice[pad..pad + n].to_vec()
}

/// Zero-phase band-pass of every channel.
pub fn bandpass_filter(rec: &Recording, band: (f64, f64)) -> Result<Recording> {
    let taps = design_bandpass(rec.sfreq, band)?;
    let rows: Vec<Vec<f64>> = (0..rec.n_channels())
        .into_par_iter()
        .map(|c| {
            let x: Vec<f64> = rec.samples.row(c).iter().copied().collect();
            filtfilt(&x, &taps)
        })
        .collect();
    let samples = DMatrix::from_fn(rec.n_channels(), rec.n_samples(), |c, s| rows[c][s]);
    Ok(Recording { samples, ..rec.clone() })
}

// ---------------------------------------------------------------------------
// Analytic phase
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSeries {
    /// (n_channels × n_samples), radians in (-π, π].
    pub phases: DMatrix<f64>,
    pub band: (f64, f64),
    pub sfreq: f64,
}

/// Analytic signal by the frequency-domain Hilbert transform.
pub fn analytic_signal(x: &[f64]) -> Vec<Complex<f64>> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    // keep DC (and Nyquist for even n), double positive, zero negative
    let half = n / 2;
    for (k, c) in buf.iter_mut().enumerate() {
        if k == 0 || (n % 2 == 0 && k == half) {
            continue;
        }
        if k < (n + 1) / 2 {
            *c *= 2.0;
        } else {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c / n as f64).collect()
}

fn wrap_phase(p: f64) -> f64 {
    if p <= -PI {
        p + 2.0 * PI
    } else {
        p
    }
}

pub fn analytic_phase(rec: &Recording, band: (f64, f64)) -> Result<PhaseSeries> {
    if rec.n_samples() < 16 {
        return Err(Error::invalid("analytic_phase needs at least 16 samples"));
    }
    let rows: Vec<Vec<f64>> = (0..rec.n_channels())
        .into_par_iter()
        .map(|c| {
            let x: Vec<f64> = rec.samples.row(c).iter().copied().collect();
            analytic_signal(&x).iter().map(|z| wrap_phase(z.im.atan2(z.re))).collect()
        })
        .collect();
    let phases = DMatrix::from_fn(rec.n_channels(), rec.n_samples(), |c, s| rows[c][s]);
    Ok(PhaseSeries { phases, band, sfreq: rec.sfreq })
}

// ---------------------------------------------------------------------------
// Windowed connectivity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub length_s: f64,
    pub step_s: f64,
    /// Span excluded at both ends of the recording before placing windows.
    pub edge_trim_s: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { length_s: 2.0, step_s: 0.5, edge_trim_s: 1.0 }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.step_s && self.step_s <= self.length_s) || self.edge_trim_s < 0.0 {
            return Err(Error::invalid("window spec needs 0 < step <= length and trim >= 0"));
        }
        Ok(())
    }

    /// Start sample of every window for a recording of `n_samples`.
    pub fn starts(&self, n_samples: usize, sfreq: f64) -> Result<(Vec<usize>, usize)> {
        self.validate()?;
        let len = (self.length_s * sfreq).round() as usize;
        let step = (self.step_s * sfreq).round() as usize;
        let trim = (self.edge_trim_s * sfreq).round() as usize;
        if len == 0 || step == 0 {
            return Err(Error::invalid("window length and step must span at least one sample"));
        }
        let usable = n_samples.saturating_sub(2 * trim);
        if usable < len {
            return Err(Error::invalid(format!(
                "window of {len} samples does not fit in {usable} usable samples"
            )));
        }
        let count = (usable - len) / step + 1;
        Ok(((0..count).map(|k| trim + k * step).collect(), len))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Plv,
    Wpli,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Plv => "plv",
            Method::Wpli => "wpli",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plv" => Ok(Method::Plv),
            "wpli" => Ok(Method::Wpli),
            other => Err(Error::invalid(format!("unknown connectivity method '{other}'"))),
        }
    }
}

/// Per-window edge vectors of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSequence {
    pub window_times: Vec<f64>,
    /// (n_windows × n_edges)
    pub edges: DMatrix<f64>,
    pub method: Method,
    pub n_channels: usize,
}

/// Denominator below which wPLI is defined as 0.
pub const WPLI_EPS: f64 = 1e-12;

/// PLV or wPLI of one window of unit phasors.
fn window_value(ca: &[f64], sa: &[f64], cb: &[f64], sb: &[f64], method: Method) -> f64 {
    let n = ca.len() as f64;
    match method {
        Method::Plv => {
            // Normalising by the summed phasor powers (n up to round-off)
            // gives exactly 1 for identical phases.
            let (mut re, mut im, mut pa, mut pb) = (0.0, 0.0, 0.0, 0.0);
            for k in 0..ca.len() {
                re += ca[k] * cb[k] + sa[k] * sb[k];
                im += sa[k] * cb[k] - ca[k] * sb[k];
                pa += ca[k] * ca[k] + sa[k] * sa[k];
                pb += cb[k] * cb[k] + sb[k] * sb[k];
            }
            ((re * re + im * im).sqrt() / (pa * pb).sqrt()).min(1.0)
        }
        Method::Wpli => {
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..ca.len() {
                let d = sa[k] * cb[k] - ca[k] * sb[k];
                num += d;
                den += d.abs();
            }
            if den / n < WPLI_EPS {
                0.0
            } else {
                (num.abs() / den).min(1.0)
            }
        }
    }
}

pub fn connectivity_windows(phase: &PhaseSeries, win: &WindowSpec, method: Method) -> Result<EdgeSequence> {
    let n_ch = phase.phases.nrows();
    let (starts, len) = win.starts(phase.phases.ncols(), phase.sfreq)?;
    let cos: Vec<Vec<f64>> = (0..n_ch).map(|c| phase.phases.row(c).iter().map(|p| p.cos()).collect()).collect();
    let sin: Vec<Vec<f64>> = (0..n_ch).map(|c| phase.phases.row(c).iter().map(|p| p.sin()).collect()).collect();
    let pairs = edge_pairs(n_ch);
    let rows: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let r = s..s + len;
            pairs
                .iter()
                .map(|&(i, j)| {
                    window_value(&cos[i][r.clone()], &sin[i][r.clone()], &cos[j][r.clone()], &sin[j][r.clone()], method)
                })
                .collect()
        })
        .collect();
    let edges = DMatrix::from_fn(starts.len(), pairs.len(), |w, e| rows[w][e]);
    Ok(EdgeSequence {
        window_times: starts.iter().map(|&s| s as f64 / phase.sfreq).collect(),
        edges,
        method,
        n_channels: n_ch,
    })
}

// ---------------------------------------------------------------------------
// Edge PCA
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    /// (state_dim × n_edges), orthonormal rows.
    pub basis: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub explained_variance: DVector<f64>,
    pub total_variance: f64,
}

impl PcaBasis {
    pub fn state_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        centered * self.basis.transpose()
    }

    pub fn inverse_transform(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = z * &self.basis;
        for mut row in x.row_iter_mut() {
            row += self.mean.transpose();
        }
        x
    }

    pub fn explained_ratio(&self) -> f64 {
        if self.total_variance <= 0.0 {
            return 1.0;
        }
        self.explained_variance.sum() / self.total_variance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityStateSequence {
    pub window_times: Vec<f64>,
    /// (n_windows × state_dim)
    pub states: DMatrix<f64>,
    pub method: Method,
    pub pca: PcaBasis,
}

/// Fit PCA on the pooled windows of all sequences (mean-centered, via SVD).
///
/// `k` is clamped to the number of edges. Components are ordered by
/// decreasing variance; each is signed so its largest-|loading| entry is
/// positive.
pub fn fit_edge_pca(seqs: &[EdgeSequence], k: usize) -> Result<PcaBasis> {
    let n_edges = seqs.first().map(|s| s.edges.ncols()).ok_or_else(|| Error::invalid("no edge sequences"))?;
    if seqs.iter().any(|s| s.edges.ncols() != n_edges) {
        return Err(Error::invalid("edge sequences disagree on edge count"));
    }
    let n: usize = seqs.iter().map(|s| s.edges.nrows()).sum();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={n} (pooled windows)")));
    }
    let k = k.min(n_edges);
    let mut pooled = DMatrix::zeros(n, n_edges);
    let mut r = 0;
    for s in seqs {
        pooled.view_mut((r, 0), s.edges.shape()).copy_from(&s.edges);
        r += s.edges.nrows();
    }
    let mean = DVector::from_iterator(n_edges, (0..n_edges).map(|j| crate::stats::mean(pooled.column(j).as_slice())));
    for mut row in pooled.row_iter_mut() {
        row -= mean.transpose();
    }
    let total_variance = pooled.iter().map(|v| v * v).sum::<f64>() / (n.max(2) - 1) as f64;
    let svd = pooled.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Singular("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut basis = DMatrix::zeros(k, n_edges);
    let mut ev = DVector::zeros(k);
    for (c, &o) in order.iter().take(k).enumerate() {
        let mut row: Vec<f64> = vt.row(o).iter().copied().collect();
        let pivot = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        for (j, v) in row.into_iter().enumerate() {
            basis[(c, j)] = v;
        }
        ev[c] = svd.singular_values[o].powi(2) / (n.max(2) - 1) as f64;
    }
    Ok(PcaBasis { basis, mean, explained_variance: ev, total_variance })
}

/// Fit (when `fitted` is `None`) and apply edge-PCA to every sequence.
pub fn edge_pca(seqs: &[EdgeSequence], k: usize, fitted: Option<&PcaBasis>) -> Result<Vec<ConnectivityStateSequence>> {
    let basis = match fitted {
        Some(b) => {
            if seqs.iter().any(|s| s.edges.ncols() != b.basis.ncols()) {
                return Err(Error::invalid("fitted basis does not match edge count"));
            }
            b.clone()
        }
        None => fit_edge_pca(seqs, k)?,
    };
    Ok(seqs
        .iter()
        .map(|s| ConnectivityStateSequence {
            window_times: s.window_times.clone(),
            states: basis.transform(&s.edges),
            method: s.method,
            pca: basis.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tone(freq: f64, sfreq: f64, secs: f64, phase: f64) -> Vec<f64> {
        let n = (sfreq * secs) as usize;
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / sfreq + phase).cos()).collect()
    }

    fn rec_from(rows: &[Vec<f64>], sfreq: f64) -> Recording {
        let m = DMatrix::from_fn(rows.len(), rows[0].len(), |c, s| rows[c][s]);
        Recording::new(m, sfreq, (0..rows.len()).map(|c| c.to_string()).collect(), "s".into(), "r".into()).unwrap()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn edge_indexing_is_lexicographic() {
        let pairs = edge_pairs(5);
        assert_eq!(pairs.len(), edge_count(5));
        for (e, &(i, j)) in pairs.iter().enumerate() {
            assert_eq!(edge_index(5, i, j), e);
        }
    }

    #[test]
    fn in_band_tone_passes() {
        let sf = 250.0;
        let x = tone(6.0, sf, 20.0, 0.3);
        let y = bandpass_filter(&rec_from(&[x.clone()], sf), (4.0, 8.0)).unwrap();
        let trim = 250;
        let y: Vec<f64> = y.samples.row(0).iter().copied().collect();
        let ratio = rms(&y[trim..y.len() - trim]) / rms(&x[trim..x.len() - trim]);
        assert!((ratio - 1.0).abs() < 0.05, "amplitude ratio {ratio}");
    }

    #[test]
    fn out_of_band_tone_is_rejected() {
        let sf = 250.0;
        let x = tone(30.0, sf, 20.0, 0.0);
        let y = bandpass_filter(&rec_from(&[x.clone()], sf), (4.0, 8.0)).unwrap();
        let y: Vec<f64> = y.samples.row(0).iter().copied().collect();
        let trim = 250;
        assert!(rms(&y[trim..y.len() - trim]) < 0.01 * rms(&x));
        // the same bound from the impulse response, evaluated in the frequency domain
        let taps = design_bandpass(sf, (4.0, 8.0)).unwrap();
        assert!(fir_gain(&taps, sf, 30.0).powi(2) < 0.01);
    }

    #[test]
    fn dc_is_removed() {
        let sf = 250.0;
        let x = vec![3.0; 5000];
        let y = bandpass_filter(&rec_from(&[x], sf), (4.0, 8.0)).unwrap();
        let trim = 250;
        let y: Vec<f64> = y.samples.row(0).iter().copied().collect();
        assert!(y[trim..y.len() - trim].iter().all(|v| v.abs() < 1e-6 * 3.0));
    }

    #[test]
    fn forward_backward_response_meets_ripple_and_stopband() {
        let sf = 250.0;
        let taps = design_bandpass(sf, (4.0, 8.0)).unwrap();
        for f in [4.0, 5.0, 6.0, 7.0, 8.0] {
            let g = fir_gain(&taps, sf, f).powi(2);
            assert!((20.0 * g.log10()).abs() < 1.0, "ripple at {f} Hz: {} dB", 20.0 * g.log10());
        }
        for f in [2.0, 12.0] {
            let g = fir_gain(&taps, sf, f).powi(2);
            assert!(20.0 * g.log10() <= -40.0, "stopband at {f} Hz: {} dB", 20.0 * g.log10());
        }
    }

    #[test]
    fn band_outside_nyquist_rejected() {
        assert!(design_bandpass(100.0, (4.0, 60.0)).is_err());
        assert!(design_bandpass(100.0, (8.0, 4.0)).is_err());
    }

    #[test]
    fn cosine_phase_ramps_at_tone_frequency() {
        let sf = 250.0;
        let x = tone(6.0, sf, 10.0, 0.0);
        let ph = analytic_phase(&rec_from(&[x], sf), (4.0, 8.0)).unwrap();
        let p: Vec<f64> = ph.phases.row(0).iter().copied().collect();
        let n = p.len();
        for i in n / 10..n - n / 10 {
            let want = wrap_phase((2.0 * PI * 6.0 * i as f64 / sf + PI).rem_euclid(2.0 * PI) - PI);
            let diff = (p[i] - want + PI).rem_euclid(2.0 * PI) - PI;
            assert!(diff.abs() < 1e-3, "sample {i}: {} vs {}", p[i], want);
        }
    }

    #[test]
    fn sine_lags_cosine_by_quarter_cycle() {
        let sf = 250.0;
        let c = tone(6.0, sf, 10.0, 0.0);
        let s = tone(6.0, sf, 10.0, -PI / 2.0);
        let ph = analytic_phase(&rec_from(&[c, s], sf), (4.0, 8.0)).unwrap();
        let n = ph.phases.ncols();
        for i in n / 10..n - n / 10 {
            let diff = (ph.phases[(1, i)] - ph.phases[(0, i)] + PI).rem_euclid(2.0 * PI) - PI;
            assert!((diff + PI / 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn narrowband_phase_mostly_advances() {
        let sf = 250.0;
        let mut r = rng(11);
        let x: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut r)).collect();
        let rec = rec_from(&[x], sf);
        let band = (5.5, 6.5);
        let filt = bandpass_filter(&rec, band).unwrap();
        let ph = analytic_phase(&filt, band).unwrap();
        let p: Vec<f64> = ph.phases.row(0).iter().copied().collect();
        let n = p.len();
        let inner = &p[n / 10..n - n / 10];
        let advancing = inner
            .windows(2)
            .filter(|w| (w[1] - w[0]).rem_euclid(2.0 * PI) < PI)
            .count();
        assert!(advancing as f64 >= 0.95 * (inner.len() - 1) as f64);
    }

    fn phase_series(rows: Vec<Vec<f64>>, sf: f64) -> PhaseSeries {
        PhaseSeries {
            phases: DMatrix::from_fn(rows.len(), rows[0].len(), |c, s| rows[c][s]),
            band: (4.0, 8.0),
            sfreq: sf,
        }
    }

    #[test]
    fn identical_and_lagged_channels() {
        let sf = 250.0;
        let n = 5000;
        let mut r = rng(5);
        let base: Vec<f64> = (0..n).map(|_| r.random_range(-PI..PI)).collect();
        let lag: Vec<f64> = base.iter().map(|p| wrap_phase((p + PI / 4.0 + PI).rem_euclid(2.0 * PI) - PI)).collect();
        let ps = phase_series(vec![base.clone(), base.clone(), lag], sf);
        let win = WindowSpec::default();
        let plv = connectivity_windows(&ps, &win, Method::Plv).unwrap();
        let wpli = connectivity_windows(&ps, &win, Method::Wpli).unwrap();
        for w in 0..plv.edges.nrows() {
            assert_eq!(plv.edges[(w, 0)], 1.0);
            assert_eq!(wpli.edges[(w, 0)], 0.0);
            assert!((plv.edges[(w, 1)] - 1.0).abs() < 1e-9);
            assert!((wpli.edges[(w, 1)] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn window_count_formula() {
        let win = WindowSpec::default();
        let (starts, len) = win.starts(20 * 250, 250.0).unwrap();
        // usable 18 s: floor((18 - 2) / 0.5) + 1
        assert_eq!(starts.len(), 33);
        assert_eq!(len, 500);
        assert_eq!(starts[0], 250);
        assert!(win.starts(600, 250.0).is_err());
    }

    #[test]
    fn random_phase_plv_matches_monte_carlo() {
        let sf = 100.0;
        let win = WindowSpec { length_s: 0.5, step_s: 0.5, edge_trim_s: 0.0 };
        let n_win = 1000;
        let len = 50;
        let mut r = rng(21);
        let a: Vec<f64> = (0..n_win * len).map(|_| r.random_range(-PI..PI)).collect();
        let b: Vec<f64> = (0..n_win * len).map(|_| r.random_range(-PI..PI)).collect();
        let ps = phase_series(vec![a, b], sf);
        let plv = connectivity_windows(&ps, &win, Method::Plv).unwrap();
        assert_eq!(plv.edges.nrows(), n_win);
        let mean_plv = plv.edges.column(0).mean();
        // Monte-Carlo oracle: independent draws of the phase difference directly
        let mut r2 = rng(99);
        let mc: f64 = (0..n_win)
            .map(|_| {
                let (mut re, mut im) = (0.0, 0.0);
                for _ in 0..len {
                    let d: f64 = r2.random_range(-PI..PI);
                    re += d.cos();
                    im += d.sin();
                }
                (re * re + im * im).sqrt() / len as f64
            })
            .sum::<f64>()
            / n_win as f64;
        assert!((mean_plv - mc).abs() < 0.1 * mc, "{mean_plv} vs {mc}");
        // Rayleigh scale √(π / 4N)
        assert!((mc - (PI / (4.0 * len as f64)).sqrt()).abs() < 0.1 * mc);
    }

    fn random_edges(n: usize, e: usize, seed: u64) -> EdgeSequence {
        let mut r = rng(seed);
        EdgeSequence {
            window_times: (0..n).map(|i| i as f64).collect(),
            edges: DMatrix::from_fn(n, e, |_, _| StandardNormal.sample(&mut r)),
            method: Method::Plv,
            n_channels: 0,
        }
    }

    #[test]
    fn pca_complete_basis_reconstructs() {
        let s = random_edges(80, 10, 3);
        let out = edge_pca(std::slice::from_ref(&s), 10, None).unwrap();
        let rec = out[0].pca.inverse_transform(&out[0].states);
        assert!((&rec - &s.edges).norm() / s.edges.norm() < 1e-10);
        let b = &out[0].pca.basis;
        let gram = b * b.transpose();
        assert!((gram - DMatrix::<f64>::identity(10, 10)).amax() < 1e-8);
    }

    #[test]
    fn pca_rank_two_captures_all_variance() {
        let mut r = rng(4);
        let u = DMatrix::<f64>::from_fn(100, 2, |_, _| StandardNormal.sample(&mut r));
        let v = DMatrix::<f64>::from_fn(2, 12, |_, _| StandardNormal.sample(&mut r));
        let s = EdgeSequence { window_times: vec![0.0; 100], edges: u * v, method: Method::Plv, n_channels: 0 };
        let basis = fit_edge_pca(&[s], 2).unwrap();
        assert!(basis.explained_ratio() >= 0.99999);
    }

    #[test]
    fn pca_transform_matches_projection_oracle() {
        let s = random_edges(200, 50, 8);
        let basis = fit_edge_pca(std::slice::from_ref(&s), 10).unwrap();
        let out = edge_pca(std::slice::from_ref(&s), 10, Some(&basis)).unwrap();
        for w in 0..200 {
            for c in 0..10 {
                let mut acc = 0.0;
                for e in 0..50 {
                    acc += (s.edges[(w, e)] - basis.mean[e]) * basis.basis[(c, e)];
                }
                assert!((acc - out[0].states[(w, c)]).abs() < 1e-9);
            }
        }
        for c in 1..10 {
            assert!(basis.explained_variance[c - 1] >= basis.explained_variance[c]);
        }
        assert!(fit_edge_pca(&[random_edges(5, 10, 1)], 6).is_err());
    }
}
