// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering sweeps and their statistics.
//!
//! A sweep generates continuations for every (prompt, strength, sample)
//! cell. Sampling seeds depend on (prompt, sample) only, so cells that share
//! them differ only through the injected vector. Each continuation is then
//! re-encoded by the unsteered model, which supplies both the perplexity and
//! the hidden states the adapter reads. Adapter scores therefore measure a
//! change in the generated text, not the injected offset itself.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{random_vector, Adapter, SteeringVector};
use crate::error::{Error, Result};
use crate::rng::{derive_path, derive_seed};
use crate::stats::{self, PermStat};
use crate::steermodel::{generate, score, ModelWeights, SteerSpec};
use crate::synthgen::Lexicon;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub strengths: Vec<f64>,
    pub n_prompts: usize,
    pub samples_per_strength: usize,
    pub gen_tokens: usize,
    pub prompt_len: usize,
    pub temperature: f64,
    pub layer: usize,
    pub n_perm: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            strengths: vec![-5.0, -2.0, -1.0, 0.0, 1.0, 2.0, 5.0],
            n_prompts: 50,
            samples_per_strength: 4,
            gen_tokens: 256,
            prompt_len: 16,
            temperature: 1.0,
            layer: 1,
            n_perm: 1000,
            seed: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.strengths.contains(&0.0) {
            return Err(Error::invalid("strengths must include 0 (baseline anchor)"));
        }
        if self.strengths.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("strengths must be finite"));
        }
        if self.n_prompts < 2 {
            return Err(Error::invalid("n_prompts must be >= 2"));
        }
        if self.samples_per_strength == 0 || self.gen_tokens == 0 || self.prompt_len == 0 {
            return Err(Error::invalid("samples, gen_tokens and prompt_len must be >= 1"));
        }
        Ok(())
    }
}

/// What gets injected in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SteeringPlan {
    /// One direction for every cell.
    Fixed(SteeringVector),
    /// A fresh isotropic direction per prompt, seeded by `(seed, prompt)`.
    RandomPerPrompt { seed: u64, d_model: usize },
}

impl SteeringPlan {
    pub fn describe(&self) -> String {
        match self {
            SteeringPlan::Fixed(v) => v.source.describe(),
            SteeringPlan::RandomPerPrompt { seed, .. } => format!("random_per_prompt({seed})"),
        }
    }

    fn direction(&self, prompt: usize, layer: usize) -> Result<Vec<f64>> {
        match self {
            SteeringPlan::Fixed(v) => Ok(v.direction.clone()),
            SteeringPlan::RandomPerPrompt { seed, d_model } => {
                Ok(random_vector(*d_model, layer, derive_seed(*seed, prompt as u64))?.direction)
            }
        }
    }
}

/// Label-table means over the generated tokens that have labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextMetrics {
    pub logfreq_mean: f64,
    /// Function-word count over content-word count (content count floored at 1).
    pub function_ratio: f64,
    pub animate_rate: f64,
    pub noun_ratio: f64,
    pub n_labeled: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    LogfreqMean,
    FunctionRatio,
    AnimateRate,
    NounRatio,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::LogfreqMean, Metric::FunctionRatio, Metric::AnimateRate, Metric::NounRatio];

    pub fn name(self) -> &'static str {
        match self {
            Metric::LogfreqMean => "logfreq_mean",
            Metric::FunctionRatio => "function_ratio",
            Metric::AnimateRate => "animate_rate",
            Metric::NounRatio => "noun_ratio",
        }
    }

    pub fn of(self, m: &TextMetrics) -> f64 {
        match self {
            Metric::LogfreqMean => m.logfreq_mean,
            Metric::FunctionRatio => m.function_ratio,
            Metric::AnimateRate => m.animate_rate,
            Metric::NounRatio => m.noun_ratio,
        }
    }
}

/// `None` when no generated token has a label.
pub fn text_metrics(tokens: &[u32], lex: &Lexicon) -> Option<TextMetrics> {
    let labeled: Vec<_> = tokens.iter().filter_map(|&t| lex.labels.get(t as usize)).collect();
    if labeled.is_empty() {
        return None;
    }
    let n = labeled.len() as f64;
    let function = labeled.iter().filter(|l| l.function).count();
    let content = labeled.len() - function;
    Some(TextMetrics {
        logfreq_mean: stats::sum(labeled.iter().map(|l| l.logfreq)) / n,
        function_ratio: function as f64 / content.max(1) as f64,
        animate_rate: labeled.iter().filter(|l| l.animate).count() as f64 / n,
        noun_ratio: labeled.iter().filter(|l| l.noun).count() as f64 / n,
        n_labeled: labeled.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_id: usize,
    pub strength: f64,
    pub sample_id: usize,
    pub tokens: Vec<u32>,
    /// Mean adapter prediction over the generated positions.
    pub adapter_scores: Vec<f64>,
    pub ppl: f64,
    pub metrics: TextMetrics,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub plan: String,
    pub layer: usize,
    pub records: Vec<GenerationRecord>,
    /// Cells whose generation or scoring failed, or produced no labeled token.
    pub invalid: usize,
}

/// The first `prompt_len` tokens of the first `n_prompts` sequences long enough.
pub fn sweep_prompts(sequences: &[Vec<u32>], n_prompts: usize, prompt_len: usize) -> Result<Vec<Vec<u32>>> {
    let prompts: Vec<Vec<u32>> = sequences
        .iter()
        .filter(|s| s.len() >= prompt_len)
        .take(n_prompts)
        .map(|s| s[..prompt_len].to_vec())
        .collect();
    if prompts.len() < n_prompts {
        return Err(Error::invalid(format!(
            "only {} held-out sequences of length >= {prompt_len}, need {n_prompts}",
            prompts.len()
        )));
    }
    Ok(prompts)
}

/// Seed of the sampling stream for one cell; independent of strength and direction.
pub fn cell_seed(sweep_seed: u64, prompt: usize, sample: usize) -> u64 {
    derive_path(sweep_seed, &[prompt as u64, sample as u64])
}

fn run_cell(
    w: &ModelWeights,
    adapter: &Adapter,
    lex: &Lexicon,
    prompt: &[u32],
    steer: &SteerSpec,
    spec: &SweepSpec,
    seed: u64,
) -> Result<Option<(Vec<u32>, Vec<f64>, f64, TextMetrics, bool)>> {
    let steer = (steer.strength != 0.0).then_some(steer);
    let g = generate(w, prompt, spec.gen_tokens, spec.temperature, seed, steer)?;
    let Some(metrics) = text_metrics(&g.tokens, lex) else {
        return Ok(None);
    };
    let mut full = prompt.to_vec();
    full.extend_from_slice(&g.tokens);
    let s = score(w, &full, Some(spec.layer))?;
    let d = w.config.d_model;
    let hidden = s.hidden.as_ref().expect("hidden requested");
    let preds = adapter.predict_rows(&hidden[prompt.len() * d..]);
    let scores: Vec<f64> = preds.column_iter().map(|c| c.mean()).collect();
    let ppl = s.mean_nll_from(prompt.len()).exp();
    if !ppl.is_finite() || scores.iter().any(|x| !x.is_finite()) {
        return Ok(None);
    }
    Ok(Some((g.tokens, scores, ppl, metrics, g.truncated || s.truncated)))
}

/// Generate and score every cell. Cells run in parallel; output order is
/// (prompt, strength in spec order, sample).
pub fn run_sweep(
    w: &ModelWeights,
    adapter: &Adapter,
    lex: &Lexicon,
    prompts: &[Vec<u32>],
    plan: &SteeringPlan,
    spec: &SweepSpec,
) -> Result<SweepResult> {
    spec.validate()?;
    if adapter.layer != spec.layer {
        return Err(Error::invalid(format!(
            "adapter reads layer {}, sweep steers layer {}",
            adapter.layer, spec.layer
        )));
    }
    if let SteeringPlan::Fixed(v) = plan {
        if v.layer != spec.layer {
            return Err(Error::invalid(format!("vector built at layer {}, sweep steers layer {}", v.layer, spec.layer)));
        }
        if v.direction.len() != w.config.d_model {
            return Err(Error::invalid("vector dimension differs from d_model"));
        }
    }
    if spec.layer > w.config.n_layers {
        return Err(Error::invalid(format!("layer {} > n_layers {}", spec.layer, w.config.n_layers)));
    }
    if prompts.len() < spec.n_prompts {
        return Err(Error::invalid(format!("{} prompts given, spec needs {}", prompts.len(), spec.n_prompts)));
    }
    let mut cells = Vec::new();
    for p in 0..spec.n_prompts {
        let direction = plan.direction(p, spec.layer)?;
        for &strength in &spec.strengths {
            for s in 0..spec.samples_per_strength {
                cells.push((p, strength, s, direction.clone()));
            }
        }
    }
    let outcomes: Vec<Result<Option<GenerationRecord>>> = cells
        .into_par_iter()
        .map(|(p, strength, s, direction)| {
            // Built without the unit-norm check so a forced zero vector can be swept.
            let steer = SteerSpec { layer: spec.layer, direction, strength };
            let out = run_cell(w, adapter, lex, &prompts[p], &steer, spec, cell_seed(spec.seed, p, s))?;
            Ok(out.map(|(tokens, adapter_scores, ppl, metrics, truncated)| GenerationRecord {
                prompt_id: p,
                strength,
                sample_id: s,
                tokens,
                adapter_scores,
                ppl,
                metrics,
                truncated,
            }))
        })
        .collect();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut invalid = 0;
    for o in outcomes {
        match o {
            Ok(Some(r)) => records.push(r),
            Ok(None) | Err(_) => invalid += 1,
        }
    }
    Ok(SweepResult {
        plan: plan.describe(),
        layer: spec.layer,
        records,
        invalid,
    })
}

/// Quantity compared between strength groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Target {
    AdapterAxis(usize),
    Metric(Metric),
    Perplexity,
}

impl Target {
    pub fn name(self) -> String {
        match self {
            Target::AdapterAxis(k) => format!("adapter_axis_{k}"),
            Target::Metric(m) => m.name().to_string(),
            Target::Perplexity => "ppl".to_string(),
        }
    }

    fn value(self, r: &GenerationRecord) -> Result<f64> {
        match self {
            Target::AdapterAxis(k) => r
                .adapter_scores
                .get(k)
                .copied()
                .ok_or_else(|| Error::invalid(format!("record has no adapter axis {k}"))),
            Target::Metric(m) => Ok(m.of(&r.metrics)),
            Target::Perplexity => Ok(r.ppl),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub target: String,
    /// Cohen's d, positive-strength group minus negative-strength group.
    pub d: f64,
    pub perm_p: f64,
    /// Pearson r of strength and value over all records, baseline included.
    pub strength_r: f64,
    pub ppl_d: f64,
    pub ppl_perm_p: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Set by [`ppl_match`].
    pub match_rate: Option<f64>,
    /// Set when the match rate is below one half.
    pub unreliable: bool,
}

fn canonical(records: &[GenerationRecord]) -> Vec<&GenerationRecord> {
    let mut v: Vec<&GenerationRecord> = records.iter().collect();
    v.sort_by(|a, b| {
        a.prompt_id
            .cmp(&b.prompt_id)
            .then(a.strength.total_cmp(&b.strength))
            .then(a.sample_id.cmp(&b.sample_id))
    });
    v
}

/// d and blocked permutation p for the sign groups of `recs`.
fn sign_effect(recs: &[&GenerationRecord], values: &[f64], blocks: &[usize], n_perm: usize, seed: u64) -> Result<(f64, f64)> {
    let mut vals = Vec::new();
    let mut labels = Vec::new();
    let mut blk = Vec::new();
    for ((r, &v), &b) in recs.iter().zip(values).zip(blocks) {
        if r.strength != 0.0 {
            vals.push(v);
            labels.push(r.strength > 0.0);
            blk.push(b);
        }
    }
    let pos: Vec<f64> = vals.iter().zip(&labels).filter(|(_, &l)| l).map(|(v, _)| *v).collect();
    let neg: Vec<f64> = vals.iter().zip(&labels).filter(|(_, &l)| !l).map(|(v, _)| *v).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("both strength-sign groups must be nonempty"));
    }
    let d = stats::cohen_d(&pos, &neg)?;
    let perm = stats::perm_test_blocked(&vals, &labels, &blk, PermStat::CohenD, n_perm, seed)?;
    Ok((d, perm.p))
}

/// Positive versus negative strengths, with strength-sign labels shuffled
/// inside prompt blocks.
pub fn evaluate(records: &[GenerationRecord], target: Target, n_perm: usize, seed: u64) -> Result<EffectReport> {
    let recs = canonical(records);
    let values: Vec<f64> = recs.iter().map(|r| target.value(r)).collect::<Result<_>>()?;
    let ppl: Vec<f64> = recs.iter().map(|r| r.ppl).collect();
    let blocks: Vec<usize> = recs.iter().map(|r| r.prompt_id).collect();
    let (d, perm_p) = sign_effect(&recs, &values, &blocks, n_perm, seed)?;
    let (ppl_d, ppl_perm_p) = sign_effect(&recs, &ppl, &blocks, n_perm, derive_seed(seed, 1))?;
    let strengths: Vec<f64> = recs.iter().map(|r| r.strength).collect();
    let strength_r = stats::pearson(&strengths, &values)?;
    Ok(EffectReport {
        target: target.name(),
        d,
        perm_p,
        strength_r,
        ppl_d,
        ppl_perm_p,
        n_pos: recs.iter().filter(|r| r.strength > 0.0).count(),
        n_neg: recs.iter().filter(|r| r.strength < 0.0).count(),
        match_rate: None,
        unreliable: false,
    })
}

/// Greedy 1:1 matching of positive- to negative-strength records on
/// perplexity. All within-caliper pairs are taken in order of increasing
/// distance (ties by position). Returns `(pos index, neg index)` pairs.
pub fn match_on_ppl(pos_ppl: &[f64], neg_ppl: &[f64], caliper: f64) -> Vec<(usize, usize)> {
    let mut cand = Vec::new();
    for (i, &a) in pos_ppl.iter().enumerate() {
        for (j, &b) in neg_ppl.iter().enumerate() {
            let dist = (a - b).abs();
            if dist <= caliper {
                cand.push((dist, i, j));
            }
        }
    }
    cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; pos_ppl.len()];
    let mut used_b = vec![false; neg_ppl.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

pub const PPL_CALIPER_SD: f64 = 0.2;
pub const MIN_MATCH_GROUP: usize = 10;

/// Effect recomputed on perplexity-matched pairs. The permutation swaps
/// labels within matched pairs. `match_rate` is pairs over the smaller group.
pub fn ppl_match(records: &[GenerationRecord], target: Target, n_perm: usize, seed: u64) -> Result<EffectReport> {
    let recs = canonical(records);
    let pos: Vec<&GenerationRecord> = recs.iter().copied().filter(|r| r.strength > 0.0).collect();
    let neg: Vec<&GenerationRecord> = recs.iter().copied().filter(|r| r.strength < 0.0).collect();
    if pos.len() < MIN_MATCH_GROUP || neg.len() < MIN_MATCH_GROUP {
        return Err(Error::invalid(format!(
            "ppl matching needs >= {MIN_MATCH_GROUP} records per group ({} pos, {} neg)",
            pos.len(),
            neg.len()
        )));
    }
    let pp: Vec<f64> = pos.iter().map(|r| r.ppl).collect();
    let np: Vec<f64> = neg.iter().map(|r| r.ppl).collect();
    let pooled = (((pp.len() - 1) as f64 * stats::variance(&pp, 1) + (np.len() - 1) as f64 * stats::variance(&np, 1))
        / (pp.len() + np.len() - 2) as f64)
        .sqrt();
    let pairs = match_on_ppl(&pp, &np, PPL_CALIPER_SD * pooled);
    let match_rate = pairs.len() as f64 / pos.len().min(neg.len()) as f64;
    let mut matched = Vec::with_capacity(2 * pairs.len());
    let mut blocks = Vec::with_capacity(2 * pairs.len());
    for (k, &(i, j)) in pairs.iter().enumerate() {
        matched.push(pos[i]);
        matched.push(neg[j]);
        blocks.push(k);
        blocks.push(k);
    }
    let (d, perm_p, ppl_d, ppl_perm_p, strength_r) = if pairs.len() >= 2 {
        let values: Vec<f64> = matched.iter().map(|r| target.value(r)).collect::<Result<_>>()?;
        let ppl: Vec<f64> = matched.iter().map(|r| r.ppl).collect();
        let (d, p) = sign_effect(&matched, &values, &blocks, n_perm, seed)?;
        let (pd, pp) = match sign_effect(&matched, &ppl, &blocks, n_perm, derive_seed(seed, 1)) {
            Ok(x) => x,
            Err(Error::Degenerate(_)) => (0.0, 1.0),
            Err(e) => return Err(e),
        };
        let strengths: Vec<f64> = matched.iter().map(|r| r.strength).collect();
        let r = stats::pearson(&strengths, &values).unwrap_or(f64::NAN);
        (d, p, pd, pp, r)
    } else {
        (f64::NAN, 1.0, f64::NAN, 1.0, f64::NAN)
    };
    Ok(EffectReport {
        target: target.name(),
        d,
        perm_p,
        strength_r,
        ppl_d,
        ppl_perm_p,
        n_pos: pairs.len(),
        n_neg: pairs.len(),
        match_rate: Some(match_rate),
        unreliable: match_rate < 0.5,
    })
}

/// One cell of a model × layer × target grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub model: String,
    pub vector: String,
    pub layer: usize,
    pub report: EffectReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrRow {
    pub model: String,
    pub vector: String,
    pub target: String,
    pub layer: usize,
    pub d: f64,
    pub perm_p: f64,
    pub q_value: f64,
    pub significant: bool,
}

/// BH-FDR over every permutation p in the grid.
pub fn fdr_summary(grid: &[GridEntry], q: f64) -> Result<Vec<FdrRow>> {
    if grid.is_empty() {
        return Err(Error::invalid("fdr_summary needs at least one report"));
    }
    let p: Vec<f64> = grid.iter().map(|g| g.report.perm_p).collect();
    let fdr = stats::bh_fdr(&p, q)?;
    Ok(grid
        .iter()
        .zip(fdr.rejected.iter().zip(&fdr.adjusted))
        .map(|(g, (&sig, &adj))| FdrRow {
            model: g.model.clone(),
            vector: g.vector.clone(),
            target: g.report.target.clone(),
            layer: g.layer,
            d: g.report.d,
            perm_p: g.report.perm_p,
            q_value: adj,
            significant: sig,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub target: String,
    pub strengths: Vec<f64>,
    pub means: Vec<f64>,
    /// Normal-approximation 95% interval of the mean.
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub plan: String,
    pub layer: usize,
    pub series: Vec<PlotSeries>,
}

/// Per-strength means with intervals for each target.
pub fn plot_data(sweep: &SweepResult, targets: &[Target]) -> Result<PlotData> {
    let mut strengths: Vec<f64> = sweep.records.iter().map(|r| r.strength).collect();
    strengths.sort_by(f64::total_cmp);
    strengths.dedup();
    let series = targets
        .iter()
        .map(|&t| {
            let mut s = PlotSeries {
                target: t.name(),
                strengths: strengths.clone(),
                means: Vec::new(),
                ci_low: Vec::new(),
                ci_high: Vec::new(),
                n: Vec::new(),
            };
            for &st in &strengths {
                let v: Vec<f64> = canonical(&sweep.records)
                    .into_iter()
                    .filter(|r| r.strength == st)
                    .map(|r| t.value(r))
                    .collect::<Result<_>>()?;
                let m = stats::mean(&v);
                let half = if v.len() > 1 { 1.96 * stats::std_dev(&v, 1) / (v.len() as f64).sqrt() } else { 0.0 };
                s.means.push(m);
                s.ci_low.push(m - half);
                s.ci_high.push(m + half);
                s.n.push(v.len());
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(PlotData {
        plan: sweep.plan.clone(),
        layer: sweep.layer,
        series,
    })
}
