// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic recordings, word streams, label tables and token corpora with
//! planted ground truth.
//!
//! Layout of the generative model:
//!
//! * a Zipf lexicon where every word type carries `logfreq`, `pos_id` and
//!   `emb_change`; latent axis `k` is feature `k` z-scored under the token distribution;
//! * channels are grouped into disjoint pairs `(0,1), (2,3), ...`; each pair
//!   shares a theta-band oscillator whose mixing weight follows
//!   `sigmoid(gain · Σ_k loading[k, pair] · score_k(word))` for the word that
//!   was active `latency_s` earlier;
//! * every channel also carries independent theta noise and 1/f noise.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_path, rng, tag};
use crate::signal::{edge_count, edge_index, Recording};
use crate::stats;

/// Feature names in column order; latent axis `k` is driven by feature `k`.
pub const FEATURES: [&str; 3] = ["logfreq", "pos_id", "emb_change"];

/// Part-of-speech ids below this value are function words.
pub const N_FUNCTION_POS: u8 = 3;
pub const NOUN_POS: u8 = 3;
pub const N_POS: u8 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_runs: usize,
    pub n_channels: usize,
    pub sfreq: f64,
    pub duration_s: f64,
    pub band: (f64, f64),
    pub n_latent_axes: usize,
    pub word_rate: f64,
    pub vocab_size: usize,
    pub seed: u64,
    pub zipf_exponent: f64,
    pub coupling_gain: f64,
    /// Delay between a word's onset and its effect on coupling.
    pub latency_s: f64,
    /// Standard deviation of the broadband 1/f component.
    pub pink_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 8,
            n_runs: 6,
            n_channels: 8,
            sfreq: 250.0,
            duration_s: 300.0,
            band: (4.0, 8.0),
            n_latent_axes: 3,
            word_rate: 2.0,
            vocab_size: 500,
            seed: 7,
            zipf_exponent: 1.0,
            coupling_gain: 1.0,
            latency_s: 0.0,
            pink_noise: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_channels < 4 {
            return Err(Error::invalid("n_channels must be >= 4"));
        }
        let (lo, hi) = self.band;
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::invalid("band must satisfy 0 < low < high"));
        }
        if self.sfreq < 4.0 * hi {
            return Err(Error::invalid(format!("sfreq {} < 4 x band high {}", self.sfreq, hi)));
        }
        if self.n_latent_axes > FEATURES.len() {
            return Err(Error::invalid(format!(
                "n_latent_axes {} exceeds the {} word features",
                self.n_latent_axes,
                FEATURES.len()
            )));
        }
        if self.n_latent_axes > self.n_channels / 2 {
            return Err(Error::invalid("need at least one coupled channel pair per latent axis"));
        }
        if self.word_rate * self.duration_s < 10.0 {
            return Err(Error::invalid("duration_s x word_rate must give >= 10 words per run"));
        }
        if self.vocab_size < 2 || self.n_runs == 0 || self.n_subjects == 0 {
            return Err(Error::invalid("vocab_size >= 2, n_runs >= 1, n_subjects >= 1 required"));
        }
        if !(self.zipf_exponent > 0.0) || self.latency_s < 0.0 || self.pink_noise < 0.0 {
            return Err(Error::invalid("zipf_exponent > 0, latency_s >= 0, pink_noise >= 0 required"));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sfreq).round() as usize
    }
}

// ---------------------------------------------------------------------------
// Lexicon and labels
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordType {
    pub word_id: u32,
    pub token: String,
    pub prob: f64,
    pub logfreq: f64,
    pub pos_id: u8,
    pub emb_change: f64,
}

/// Per-word label table keyed by `word_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub word_id: u32,
    pub token: String,
    pub logfreq: f64,
    pub pos_id: u8,
    pub function: bool,
    pub noun: bool,
    pub animate: bool,
    pub concreteness: f64,
    /// Word length in characters of a notional surface form; a confound.
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: Vec<WordType>,
    pub labels: Vec<LabelRow>,
}

impl Lexicon {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Raw feature value `f` (index into [`FEATURES`]) of `word_id`.
    pub fn feature(&self, word_id: u32, f: usize) -> f64 {
        let w = &self.words[word_id as usize];
        match f {
            0 => w.logfreq,
            1 => w.pos_id as f64,
            2 => w.emb_change,
            _ => panic!("feature index {f} out of range"),
        }
    }

    /// Feature values z-scored across word types.
    pub fn zscored_feature(&self, f: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.len()).map(|w| self.feature(w as u32, f)).collect();
        let m = stats::mean(&raw);
        let s = stats::std_dev(&raw, 0).max(1e-12);
        raw.iter().map(|v| (v - m) / s).collect()
    }

    /// Feature values z-scored under the token distribution (weights = word probabilities).
    pub fn token_zscored_feature(&self, f: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.len()).map(|w| self.feature(w as u32, f)).collect();
        let total = stats::sum(self.words.iter().map(|w| w.prob));
        let m = stats::sum(raw.iter().zip(&self.words).map(|(v, w)| v * w.prob)) / total;
        let var = stats::sum(raw.iter().zip(&self.words).map(|(v, w)| (v - m).powi(2) * w.prob)) / total;
        let s = var.sqrt().max(1e-12);
        raw.iter().map(|v| (v - m) / s).collect()
    }
}

/// Build the Zipf lexicon and its label tables. Word id 0 is the most frequent.
pub fn gen_lexicon(spec: &SynthSpec) -> Result<Lexicon> {
    spec.validate()?;
    let v = spec.vocab_size;
    let weights: Vec<f64> = (1..=v).map(|r| (r as f64).powf(-spec.zipf_exponent)).collect();
    let total = stats::sum(weights.iter().copied());
    let mut r = rng(derive_path(spec.seed, &[tag("lexicon")]));
    let exp = Exp::new(1.0).expect("unit rate");
    let mut words = Vec::with_capacity(v);
    for (i, w) in weights.iter().enumerate() {
        let prob = w / total;
        words.push(WordType {
            word_id: i as u32,
            token: format!("w{i:04}"),
            prob,
            logfreq: prob.ln(),
            pos_id: r.random_range(0..N_POS),
            emb_change: exp.sample(&mut r),
        });
    }
    let mut lex = Lexicon { words, labels: Vec::new() };
    let emb_z = lex.zscored_feature(2);
    let mut r = rng(derive_path(spec.seed, &[tag("labels")]));
    lex.labels = lex
        .words
        .iter()
        .zip(&emb_z)
        .map(|(w, &ez)| {
            let noise: f64 = StandardNormal.sample(&mut r);
            let concreteness = 0.5 * ez + 0.75f64.sqrt() * noise;
            let animate = r.random::<f64>() < 1.0 / (1.0 + (-(ez - 0.5)).exp());
            let length = (3.0 - 0.4 * w.logfreq + r.random_range(-1.0..1.0)).round();
            LabelRow {
                word_id: w.word_id,
                token: w.token.clone(),
                logfreq: w.logfreq,
                pos_id: w.pos_id,
                function: w.pos_id < N_FUNCTION_POS,
                noun: w.pos_id == NOUN_POS,
                animate,
                concreteness,
                length,
            }
        })
        .collect();
    Ok(lex)
}

// ---------------------------------------------------------------------------
// Word streams
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordEvent {
    pub onset: f64,
    pub offset: f64,
    pub word_id: u32,
    pub token: String,
    pub logfreq: f64,
    pub pos_id: u8,
    pub emb_change: f64,
}

impl WordEvent {
    /// Feature `f` (index into [`FEATURES`]).
    pub fn feature(&self, f: usize) -> f64 {
        match f {
            0 => self.logfreq,
            1 => self.pos_id as f64,
            2 => self.emb_change,
            _ => panic!("feature index {f} out of range"),
        }
    }
}

fn zipf_cdf(lex: &Lexicon) -> Vec<f64> {
    let mut acc = 0.0;
    lex.words
        .iter()
        .map(|w| {
            acc += w.prob;
            acc
        })
        .collect()
}

fn sample_cdf(cdf: &[f64], u: f64) -> usize {
    let target = u * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= target).min(cdf.len() - 1)
}

/// Word events of story `run`. Stories are shared by every subject.
///
/// Onsets follow a homogeneous Poisson process at `word_rate`; word ids are
/// drawn i.i.d. from the Zipf lexicon.
pub fn gen_word_stream(spec: &SynthSpec, lex: &Lexicon, run: usize) -> Result<Vec<WordEvent>> {
    if spec.word_rate * spec.duration_s < 1.0 {
        return Err(Error::invalid("word_rate x duration_s < 1"));
    }
    spec.validate()?;
    if lex.len() != spec.vocab_size {
        return Err(Error::invalid("lexicon does not match vocab_size"));
    }
    let cdf = zipf_cdf(lex);
    let mut r = rng(derive_path(spec.seed, &[tag("story"), run as u64]));
    let gaps = Exp::new(spec.word_rate).map_err(|e| Error::invalid(e.to_string()))?;
    let mut onsets = Vec::new();
    let mut t: f64 = gaps.sample(&mut r);
    while t < spec.duration_s {
        onsets.push(t);
        t += gaps.sample(&mut r);
    }
    let mut events = Vec::with_capacity(onsets.len());
    for (i, &onset) in onsets.iter().enumerate() {
        let next = onsets.get(i + 1).copied().unwrap_or(spec.duration_s);
        let dur = (0.8 * (next - onset)).min(0.6).max(1e-3);
        let w = &lex.words[sample_cdf(&cdf, r.random::<f64>())];
        events.push(WordEvent {
            onset,
            offset: onset + dur,
            word_id: w.word_id,
            token: w.token.clone(),
            logfreq: w.logfreq,
            pos_id: w.pos_id,
            emb_change: w.emb_change,
        });
    }
    Ok(events)
}

// ---------------------------------------------------------------------------
// Planted truth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    /// (n_latent_axes × n_edges) loading of each axis on each channel pair.
    pub axis_loadings: DMatrix<f64>,
    /// (vocab × n_latent_axes) planted word scores.
    pub word_axis_scores: DMatrix<f64>,
    /// `feature_axis_map[k]` is the feature index driving axis `k`.
    pub feature_axis_map: Vec<usize>,
}

/// Channel pairs carrying a shared oscillator: (0,1), (2,3), ...
pub fn coupled_pairs(n_channels: usize) -> Vec<(usize, usize)> {
    (0..n_channels / 2).map(|p| (2 * p, 2 * p + 1)).collect()
}

pub fn plant_truth(spec: &SynthSpec, lex: &Lexicon) -> Result<PlantedTruth> {
    spec.validate()?;
    let k = spec.n_latent_axes;
    let pairs = coupled_pairs(spec.n_channels);
    let n_edges = edge_count(spec.n_channels);
    let mut r = rng(derive_path(spec.seed, &[tag("loadings")]));
    // Gram-Schmidt on random rows over the coupled pairs gives exactly orthonormal loadings.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v: Vec<f64> = (0..pairs.len()).map(|_| StandardNormal.sample(&mut r)).collect();
        for u in &rows {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.iter().map(|a| a / norm).collect());
        }
    }
    let mut loadings = DMatrix::zeros(k, n_edges);
    for (a, row) in rows.iter().enumerate() {
        for (p, &(i, j)) in pairs.iter().enumerate() {
            loadings[(a, edge_index(spec.n_channels, i, j))] = row[p];
        }
    }
    let mut scores = DMatrix::zeros(lex.len(), k);
    for a in 0..k {
        for (w, z) in lex.token_zscored_feature(a).into_iter().enumerate() {
            scores[(w, a)] = z;
        }
    }
    Ok(PlantedTruth {
        axis_loadings: loadings,
        word_axis_scores: scores,
        feature_axis_map: (0..k).collect(),
    })
}

// ---------------------------------------------------------------------------
// Recordings
// ---------------------------------------------------------------------------

/// Per-pair planted drive sampled at `sfreq`: (n_pairs × n_samples).
pub fn coupling_drive(spec: &SynthSpec, truth: &PlantedTruth, events: &[WordEvent]) -> Vec<Vec<f64>> {
    let n = spec.n_samples();
    let pairs = coupled_pairs(spec.n_channels);
    let k = truth.axis_loadings.nrows();
    let mut drive = vec![vec![0.0; n]; pairs.len()];
    if k == 0 || events.is_empty() {
        return drive;
    }
    let mut ev = 0usize;
    for s in 0..n {
        let t = s as f64 / spec.sfreq - spec.latency_s;
        while ev + 1 < events.len() && events[ev + 1].onset <= t {
            ev += 1;
        }
        if events[ev].onset > t {
            continue;
        }
        let w = events[ev].word_id as usize;
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let e = edge_index(spec.n_channels, i, j);
            let mut d = 0.0;
            for a in 0..k {
                d += truth.axis_loadings[(a, e)] * truth.word_axis_scores[(w, a)];
            }
            drive[p][s] = spec.coupling_gain * d;
        }
    }
    drive
}

/// Shape white Gaussian noise in the frequency domain, then scale to unit variance.
fn shaped_noise(n: usize, sfreq: f64, seed: u64, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut r = rng(seed);
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(&mut r), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (i, c) in buf.iter_mut().enumerate() {
        let k = if i <= n / 2 { i } else { n - i };
        *c *= gain(k as f64 * sfreq / n as f64);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let sd = stats::std_dev(&x, 0);
    if sd > 0.0 {
        x.iter().map(|v| v / sd).collect()
    } else {
        x
    }
}

fn band_gain(f: f64, lo: f64, hi: f64) -> f64 {
    // raised-cosine shoulders 0.5 Hz wide
    let w = 0.5;
    if f < lo - w || f > hi + w {
        0.0
    } else if f < lo {
        0.5 - 0.5 * (PI * (f - (lo - w)) / w).cos()
    } else if f > hi {
        0.5 + 0.5 * (PI * (f - hi) / w).cos()
    } else {
        1.0
    }
}

/// Synthesize one subject's recording of one story.
pub fn gen_recording(
    spec: &SynthSpec,
    truth: &PlantedTruth,
    events: &[WordEvent],
    subject: usize,
    run: usize,
) -> Result<Recording> {
    spec.validate()?;
    if let Some(last) = events.last() {
        if last.offset > spec.duration_s + 1e-9 {
            return Err(Error::invalid(format!(
                "events end at {:.3} s but the recording lasts {:.3} s",
                last.offset, spec.duration_s
            )));
        }
    }
    if events.windows(2).any(|w| w[1].onset < w[0].onset) {
        return Err(Error::invalid("events must be sorted by onset"));
    }
    let n = spec.n_samples();
    let n_ch = spec.n_channels;
    let (lo, hi) = spec.band;
    let base = derive_path(spec.seed, &[tag("recording"), subject as u64, run as u64]);
    let mut samples = DMatrix::zeros(n_ch, n);

    let pink = |ch: usize| {
        shaped_noise(n, spec.sfreq, derive_path(base, &[tag("pink"), ch as u64]), |f| {
            if f > 0.0 {
                1.0 / f.sqrt()
            } else {
                0.0
            }
        })
    };
    let theta = |label: &str, idx: usize| {
        shaped_noise(n, spec.sfreq, derive_path(base, &[tag(label), idx as u64]), |f| band_gain(f, lo, hi))
    };

    if truth.axis_loadings.nrows() == 0 {
        for ch in 0..n_ch {
            let p = pink(ch);
            for s in 0..n {
                samples[(ch, s)] = spec.pink_noise.max(1e-3) * p[s];
            }
        }
    } else {
        let drive = coupling_drive(spec, truth, events);
        let pairs = coupled_pairs(n_ch);
        let mut paired = vec![false; n_ch];
        for (p, &(a, b)) in pairs.iter().enumerate() {
            let shared = theta("shared", p);
            for &ch in &[a, b] {
                paired[ch] = true;
                let own = theta("own", ch);
                let pk = pink(ch);
                for s in 0..n {
                    let c = 1.0 / (1.0 + (-drive[p][s]).exp());
                    samples[(ch, s)] = c.sqrt() * shared[s] + (1.0 - c).sqrt() * own[s] + spec.pink_noise * pk[s];
                }
            }
        }
        for ch in (0..n_ch).filter(|&c| !paired[c]) {
            let own = theta("own", ch);
            let pk = pink(ch);
            for s in 0..n {
                samples[(ch, s)] = own[s] + spec.pink_noise * pk[s];
            }
        }
    }

    Recording::new(
        samples,
        spec.sfreq,
        (0..n_ch).map(|c| format!("CH{c:03}")).collect(),
        format!("sub-{subject:02}"),
        format!("run-{run:02}"),
    )
}

// ---------------------------------------------------------------------------
// Token corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_sequences: usize,
    pub seq_len: usize,
    /// Use the frequency/POS-dependent bigram process; otherwise draw unigrams.
    pub bigram: bool,
    /// Sharpening after frequent words: P(j|i) ∝ p_j^(1 + freq_coupling·tanh(z_i)) · pos term,
    /// with `z_i` the token-weighted logfreq z-score of the preceding word.
    pub freq_coupling: f64,
    /// Scale of the POS transition log-potentials.
    pub pos_coupling: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_sequences: 600,
            seq_len: 128,
            bigram: true,
            freq_coupling: 0.5,
            pos_coupling: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub sequences: Vec<Vec<u32>>,
    /// Set when the corpus holds no sequences.
    pub empty: bool,
}

impl Corpus {
    pub fn n_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Row-stochastic transition table of the corpus process.
pub fn transition_matrix(spec: &SynthSpec, lex: &Lexicon, cs: &CorpusSpec) -> DMatrix<f64> {
    let v = lex.len();
    let mut t = DMatrix::zeros(v, v);
    if !cs.bigram {
        for i in 0..v {
            for j in 0..v {
                t[(i, j)] = lex.words[j].prob;
            }
        }
        return t;
    }
    let mut r = rng(derive_path(spec.seed, &[tag("pos-transitions")]));
    let pos_pot: Vec<f64> = (0..(N_POS as usize * N_POS as usize))
        .map(|_| cs.pos_coupling * { let z: f64 = StandardNormal.sample(&mut r); z })
        .collect();
    let z = lex.token_zscored_feature(0);
    for i in 0..v {
        let expo = (1.0 + cs.freq_coupling * z[i].tanh()).max(0.1);
        let pi = lex.words[i].pos_id as usize;
        let mut row: Vec<f64> = (0..v)
            .map(|j| expo * lex.words[j].logfreq + pos_pot[pi * N_POS as usize + lex.words[j].pos_id as usize])
            .collect();
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|x| *x = (*x - mx).exp());
        let s = stats::sum(row.iter().copied());
        for j in 0..v {
            t[(i, j)] = row[j] / s;
        }
    }
    t
}

pub fn gen_corpus(spec: &SynthSpec, lex: &Lexicon, cs: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    if spec.vocab_size < 50 {
        return Err(Error::invalid("corpus generation needs vocab_size >= 50"));
    }
    if cs.n_sequences == 0 {
        return Ok(Corpus { sequences: Vec::new(), empty: true });
    }
    if cs.seq_len == 0 {
        return Err(Error::invalid("seq_len must be >= 1"));
    }
    let t = transition_matrix(spec, lex, cs);
    let v = lex.len();
    let cdfs: Vec<Vec<f64>> = (0..v)
        .map(|i| {
            let mut acc = 0.0;
            (0..v)
                .map(|j| {
                    acc += t[(i, j)];
                    acc
                })
                .collect()
        })
        .collect();
    let unigram = zipf_cdf(lex);
    let sequences = (0..cs.n_sequences)
        .map(|s| {
            let mut r = rng(derive_path(spec.seed, &[tag("corpus"), s as u64]));
            let mut seq = Vec::with_capacity(cs.seq_len);
            let mut cur = sample_cdf(&unigram, r.random::<f64>());
            seq.push(cur as u32);
            while seq.len() < cs.seq_len {
                cur = sample_cdf(&cdfs[cur], r.random::<f64>());
                seq.push(cur as u32);
            }
            seq
        })
        .collect();
    Ok(Corpus { sequences, empty: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_subjects: 1,
            n_runs: 1,
            duration_s: 60.0,
            vocab_size: 100,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn logfreq_strictly_decreasing_in_rank() {
        let lex = gen_lexicon(&small_spec()).unwrap();
        assert!(lex.words.windows(2).all(|w| w[0].logfreq > w[1].logfreq));
        assert_eq!(lex.words[0].word_id, 0);
        let total: f64 = lex.words.iter().map(|w| w.prob).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn word_stream_is_deterministic_and_sorted() {
        let spec = small_spec();
        let lex = gen_lexicon(&spec).unwrap();
        let a = gen_word_stream(&spec, &lex, 0).unwrap();
        let b = gen_word_stream(&spec, &lex, 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_word_stream(&spec, &lex, 1).unwrap());
        assert!(a.windows(2).all(|w| w[0].onset < w[1].onset && w[0].offset < w[1].onset));
        assert!(a.iter().all(|e| e.onset < e.offset && (e.word_id as usize) < spec.vocab_size));
    }

    #[test]
    fn event_count_matches_poisson_interval() {
        // Poisson(1200) has a 99% interval of about [1111, 1289].
        let spec = SynthSpec { duration_s: 600.0, word_rate: 2.0, ..small_spec() };
        let lex = gen_lexicon(&spec).unwrap();
        for run in 0..5 {
            let n = gen_word_stream(&spec, &lex, run).unwrap().len();
            assert!((1100..=1300).contains(&n), "run {run}: {n} events");
        }
    }

    #[test]
    fn rejects_too_few_words() {
        let spec = SynthSpec { duration_s: 0.4, word_rate: 2.0, ..small_spec() };
        let lex = gen_lexicon(&small_spec()).unwrap();
        assert!(gen_word_stream(&spec, &lex, 0).is_err());
        assert!(SynthSpec { n_channels: 3, ..small_spec() }.validate().is_err());
        assert!(SynthSpec { sfreq: 20.0, ..small_spec() }.validate().is_err());
    }

    #[test]
    fn loadings_are_orthonormal_and_single_feature() {
        let spec = SynthSpec::default();
        let lex = gen_lexicon(&spec).unwrap();
        let truth = plant_truth(&spec, &lex).unwrap();
        let g = &truth.axis_loadings * truth.axis_loadings.transpose();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-12);
            }
        }
        assert_eq!(truth.feature_axis_map, vec![0, 1, 2]);
    }

    #[test]
    fn labels_share_word_ids_with_lexicon() {
        let lex = gen_lexicon(&small_spec()).unwrap();
        assert_eq!(lex.labels.len(), lex.words.len());
        for (l, w) in lex.labels.iter().zip(&lex.words) {
            assert_eq!(l.word_id, w.word_id);
            assert_eq!(l.function, w.pos_id < N_FUNCTION_POS);
        }
    }

    #[test]
    fn recording_is_bit_identical_under_seed() {
        let spec = SynthSpec { duration_s: 20.0, ..small_spec() };
        let lex = gen_lexicon(&spec).unwrap();
        let truth = plant_truth(&spec, &lex).unwrap();
        let ev = gen_word_stream(&spec, &lex, 0).unwrap();
        let a = gen_recording(&spec, &truth, &ev, 0, 0).unwrap();
        let b = gen_recording(&spec, &truth, &ev, 0, 0).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = gen_recording(&spec, &truth, &ev, 1, 0).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn recording_rejects_events_past_end() {
        let spec = SynthSpec { duration_s: 20.0, ..small_spec() };
        let lex = gen_lexicon(&spec).unwrap();
        let truth = plant_truth(&spec, &lex).unwrap();
        let mut ev = gen_word_stream(&spec, &lex, 0).unwrap();
        ev.last_mut().unwrap().offset = 25.0;
        assert!(matches!(gen_recording(&spec, &truth, &ev, 0, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn corpus_determinism_and_empty_flag() {
        let spec = small_spec();
        let lex = gen_lexicon(&spec).unwrap();
        let cs = CorpusSpec { n_sequences: 5, seq_len: 20, ..CorpusSpec::default() };
        assert_eq!(gen_corpus(&spec, &lex, &cs).unwrap(), gen_corpus(&spec, &lex, &cs).unwrap());
        let empty = gen_corpus(&spec, &lex, &CorpusSpec { n_sequences: 0, ..cs.clone() }).unwrap();
        assert!(empty.empty && empty.sequences.is_empty());
        let tiny = SynthSpec { vocab_size: 20, ..small_spec() };
        let tiny_lex = gen_lexicon(&tiny).unwrap();
        assert!(gen_corpus(&tiny, &tiny_lex, &cs).is_err());
    }

    #[test]
    fn bigram_rows_are_stochastic_and_frequency_persistent() {
        let spec = small_spec();
        let lex = gen_lexicon(&spec).unwrap();
        let t = transition_matrix(&spec, &lex, &CorpusSpec::default());
        for i in 0..lex.len() {
            let s: f64 = t.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // expected next-token logfreq is higher after the most frequent word
        let next_lf = |i: usize| (0..lex.len()).map(|j| t[(i, j)] * lex.words[j].logfreq).sum::<f64>();
        assert!(next_lf(0) > next_lf(lex.len() - 1));
    }
}
