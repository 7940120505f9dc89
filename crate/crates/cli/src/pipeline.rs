// SPDX-License-Identifier: MIT OR Apache-2.0

//! In-memory pipeline steps. The file-based stages in [`crate::stages`] call
//! these and handle persistence.

use nalgebra::DMatrix;
use neuraxis::adapter::{
    actadd_vector, brain_axis_vector, collect_word_hidden, fit_adapter, random_vector, text_probe, Adapter,
    AdapterConfig, HiddenTable, SteeringVector,
};
use neuraxis::atlas::{
    average_atlases, build_design, build_word_atlas, fit_state_model, Provenance, RunPredictions, RunWindows,
    StateModel, WordAtlas,
};
use neuraxis::axes::{
    self, association_table, fit_ica, match_axes, numerical_rank, parallel_analysis_rank, AxisBasis, IcaConfig,
    LabelColumn, LabelValues, Statistic, ValidationConfig, ValidationReport,
};
use neuraxis::error::Error;
use neuraxis::harness::{self, EffectReport, Metric, SteeringPlan, SweepResult, Target};
use neuraxis::rng::derive_seed;
use neuraxis::signal::{
    analytic_phase, bandpass_filter, connectivity_windows, edge_pca, ConnectivityStateSequence, EdgeSequence, Method,
    Recording, WindowSpec,
};
use neuraxis::steermodel::ModelWeights;
use neuraxis::synthgen::{Lexicon, PlantedTruth, WordEvent, FEATURES};
use serde::{Deserialize, Serialize};

use crate::config::{AtlasConfig, AxesConfig, RandomControl};
use crate::error::Result;

/// Filter, extract phase and compute windowed connectivity of one recording.
pub fn edges_of(rec: &Recording, band: (f64, f64), win: &WindowSpec, method: Method) -> Result<EdgeSequence> {
    let filtered = bandpass_filter(rec, band)?;
    let phase = analytic_phase(&filtered, band)?;
    Ok(connectivity_windows(&phase, win, method)?)
}

/// Shared edge-PCA over every sequence.
pub fn states_of(edges: &[EdgeSequence], k: usize) -> Result<Vec<ConnectivityStateSequence>> {
    let n_edges = edges.first().map_or(0, |e| e.edges.ncols());
    Ok(edge_pca(edges, k.min(n_edges.max(1)), None)?)
}

pub struct AtlasOutput {
    pub subject_atlases: Vec<WordAtlas>,
    pub atlas: WordAtlas,
    pub models: Vec<StateModel>,
}

/// Per-subject lagged ridge with run-fold OOF predictions, word-type
/// averaging, then the cross-subject mean. `states[s][r]` is subject `s`, run `r`.
pub fn build_atlases(
    states: &[Vec<ConnectivityStateSequence>],
    streams: &[Vec<WordEvent>],
    cfg: &AtlasConfig,
) -> Result<AtlasOutput> {
    let features = cfg.feature_indices()?;
    let mut subject_atlases = Vec::with_capacity(states.len());
    let mut models = Vec::with_capacity(states.len());
    for (s, runs) in states.iter().enumerate() {
        if runs.len() != streams.len() {
            return Err(Error::invalid(format!("subject {s} has {} runs, {} word streams", runs.len(), streams.len())).into());
        }
        let windows: Vec<RunWindows> = runs
            .iter()
            .zip(streams)
            .map(|(st, ev)| RunWindows { events: ev, window_times: &st.window_times })
            .collect();
        let design = build_design(&windows, &cfg.lags_s, &features)?;
        let mut y = DMatrix::zeros(design.x.nrows(), runs[0].states.ncols());
        let mut row = 0;
        for st in runs {
            y.view_mut((row, 0), st.states.shape()).copy_from(&st.states);
            row += st.states.nrows();
        }
        let (model, oof) = fit_state_model(&design, &y, &cfg.alphas, cfg.n_folds)?;
        let mut blocks = Vec::with_capacity(runs.len());
        let mut row = 0;
        for st in runs {
            let n = st.states.nrows();
            blocks.push(oof.rows(row, n).into_owned());
            row += n;
        }
        let preds: Vec<RunPredictions> = blocks
            .iter()
            .zip(runs.iter().zip(streams))
            .map(|(p, (st, ev))| RunPredictions { predictions: p, events: ev, window_times: &st.window_times })
            .collect();
        let atlas = build_word_atlas(&preds, Provenance { kind: "oof".into(), subjects: vec![format!("sub-{s:02}")] })?;
        subject_atlases.push(atlas);
        models.push(model);
    }
    let atlas = average_atlases(&subject_atlases)?;
    Ok(AtlasOutput { subject_atlases, atlas, models })
}

/// Axis count actually fitted: the configured count, optionally capped at the
/// atlas rank and the parallel-analysis floor (never below one).
pub fn axis_count(atlas: &WordAtlas, cfg: &AxesConfig, seed: u64) -> usize {
    let mut n = cfg.ica.n_axes.min(atlas.state_dim());
    if cfg.cap_at_noise_floor {
        n = n
            .min(numerical_rank(&atlas.atlas))
            .min(parallel_analysis_rank(&atlas.atlas, cfg.n_null, 0.95, derive_seed(seed, 1)));
    }
    n.max(1)
}

/// FastICA with the capped axis count. A run that never converges keeps its
/// best iterate; the flag is carried in the basis.
pub fn fit_axes(atlas: &WordAtlas, cfg: &AxesConfig, ica: &IcaConfig) -> Result<AxisBasis> {
    let n = axis_count(atlas, cfg, ica.seed);
    match fit_ica(atlas, &IcaConfig { n_axes: n, ..ica.clone() }) {
        Ok(b) => Ok(b),
        Err(Error::IcaNotConverged { best, .. }) => Ok(*best),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedMatch {
    pub planted_axis: usize,
    pub feature: String,
    pub ica_axis: usize,
    pub r: f64,
}

/// Match planted word scores to fitted axes over the atlas words.
pub fn planted_match(truth: &PlantedTruth, basis: &AxisBasis) -> Result<Vec<PlantedMatch>> {
    let k = truth.word_axis_scores.ncols();
    let planted = DMatrix::from_fn(basis.word_ids.len(), k, |i, j| truth.word_axis_scores[(basis.word_ids[i] as usize, j)]);
    let m = match_axes(&planted, &basis.scores)?;
    Ok(m.pairs
        .iter()
        .map(|p| PlantedMatch {
            planted_axis: p.a,
            feature: FEATURES[truth.feature_axis_map[p.a]].to_string(),
            ica_axis: p.b,
            r: p.r,
        })
        .collect())
}

pub const CONTINUOUS_LABELS: [&str; 3] = ["logfreq", "concreteness", "length"];
pub const BINARY_LABELS: [&str; 3] = ["function", "noun", "animate"];

/// Label columns over `word_ids`, and the confound matrix (logfreq, length)
/// used for binary labels.
pub fn label_columns(lex: &Lexicon, word_ids: &[u32]) -> (Vec<LabelColumn>, DMatrix<f64>) {
    let rows: Vec<_> = word_ids.iter().map(|&w| &lex.labels[w as usize]).collect();
    let cont = |f: fn(&neuraxis::synthgen::LabelRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
    let bin = |f: fn(&neuraxis::synthgen::LabelRow) -> bool| rows.iter().map(|r| f(r)).collect::<Vec<bool>>();
    let cols = vec![
        LabelColumn { name: "logfreq".into(), values: LabelValues::Continuous(cont(|r| r.logfreq)) },
        LabelColumn { name: "concreteness".into(), values: LabelValues::Continuous(cont(|r| r.concreteness)) },
        LabelColumn { name: "length".into(), values: LabelValues::Continuous(cont(|r| r.length)) },
        LabelColumn { name: "function".into(), values: LabelValues::Binary(bin(|r| r.function)) },
        LabelColumn { name: "noun".into(), values: LabelValues::Binary(bin(|r| r.noun)) },
        LabelColumn { name: "animate".into(), values: LabelValues::Binary(bin(|r| r.animate)) },
    ];
    let confounds = DMatrix::from_fn(rows.len(), 2, |i, j| if j == 0 { rows[i].logfreq } else { rows[i].length });
    (cols, confounds)
}

pub fn validate_axes(basis: &AxisBasis, lex: &Lexicon, cfg: &ValidationConfig, q: f64) -> Result<Vec<ValidationReport>> {
    let (cols, confounds) = label_columns(lex, &basis.word_ids);
    let mut reports = association_table(
        basis,
        &cols,
        |name| BINARY_LABELS.contains(&name).then(|| confounds.clone()),
        cfg,
    )?;
    axes::fdr_annotate(&mut reports, q)?;
    Ok(reports)
}

/// The axis most associated with log-frequency, and the sign of that r.
pub fn frequency_axis(reports: &[ValidationReport]) -> Result<(usize, f64)> {
    reports
        .iter()
        .filter(|r| r.label == "logfreq" && r.statistic == Statistic::R)
        .max_by(|a, b| a.estimate.abs().total_cmp(&b.estimate.abs()).then(b.axis.cmp(&a.axis)))
        .map(|r| (r.axis, r.estimate))
        .ok_or_else(|| Error::invalid("no logfreq association rows").into())
}

/// Token ids of each story's word stream.
pub fn story_tokens(streams: &[Vec<WordEvent>]) -> Vec<Vec<u32>> {
    streams.iter().map(|s| s.iter().map(|e| e.word_id).collect()).collect()
}

pub struct LayerVectors {
    pub layer: usize,
    pub table: HiddenTable,
    pub adapter: Adapter,
    pub text_probe_adapter: Adapter,
    pub brain_axis: usize,
    /// brain axis, ActAdd, random, text probe
    pub vectors: Vec<(String, SteeringVector)>,
}

impl LayerVectors {
    pub fn vector(&self, name: &str) -> Option<&SteeringVector> {
        self.vectors.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Pairwise cosines in vector order.
    pub fn cosines(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for i in 0..self.vectors.len() {
            for j in i + 1..self.vectors.len() {
                let (a, b) = (&self.vectors[i], &self.vectors[j]);
                out.push((a.0.clone(), b.0.clone(), a.1.cosine(&b.1)));
            }
        }
        out
    }
}

/// Adapter and steering vectors at one layer.
///
/// The brain-axis vector is oriented so positive strength moves toward the
/// frequent end of `axis` (`sign` is the sign of the axis' logfreq r).
pub fn layer_vectors(
    w: &ModelWeights,
    stories: &[Vec<u32>],
    basis: &AxisBasis,
    lex: &Lexicon,
    axis: usize,
    sign: f64,
    cfg: &AdapterConfig,
) -> Result<LayerVectors> {
    let table = collect_word_hidden(w, stories, cfg.layer)?;
    let adapter = fit_adapter(&table, &basis.word_ids, &basis.scores, cfg)?;
    let mut brain = brain_axis_vector(&adapter, axis)?;
    if sign < 0.0 {
        brain = brain.negated();
    }
    let logfreq: Vec<f64> = table.word_ids.iter().map(|&i| lex.labels[i as usize].logfreq).collect();
    let actadd = actadd_vector(&table, "logfreq", &logfreq, cfg.n_top)?;
    let random = random_vector(w.config.d_model, cfg.layer, derive_seed(cfg.seed, 0x5eed))?;
    let (probe, probe_adapter) = text_probe(&table, "logfreq", &table.word_ids, &logfreq, cfg)?;
    Ok(LayerVectors {
        layer: cfg.layer,
        table,
        adapter,
        text_probe_adapter: probe_adapter,
        brain_axis: axis,
        vectors: vec![
            ("brain_axis".into(), brain),
            ("actadd".into(), actadd),
            ("random".into(), random),
            ("text_probe".into(), probe),
        ],
    })
}

/// Sweep plans for one layer: every configured vector, with the random
/// control either fixed or redrawn per prompt.
pub fn sweep_plans(
    layer: usize,
    vectors: &[(String, SteeringVector)],
    control: RandomControl,
    run_actadd: bool,
    run_text_probe: bool,
    seed: u64,
) -> Vec<(String, SteeringPlan)> {
    let mut plans = Vec::new();
    for (name, v) in vectors {
        let plan = match name.as_str() {
            "actadd" if !run_actadd => continue,
            "text_probe" if !run_text_probe => continue,
            "random" if control == RandomControl::PerPrompt => {
                SteeringPlan::RandomPerPrompt { seed: derive_seed(seed, layer as u64), d_model: v.direction.len() }
            }
            _ => SteeringPlan::Fixed(v.clone()),
        };
        plans.push((name.clone(), plan));
    }
    plans
}

/// Held-out prompts: the trailing corpus sequences that training kept for
/// validation.
pub fn heldout_prompts(sequences: &[Vec<u32>], val_fraction: f64, n_prompts: usize, prompt_len: usize) -> Result<Vec<Vec<u32>>> {
    let n = sequences.len();
    if n < 2 {
        return Err(Error::invalid("corpus needs at least two sequences").into());
    }
    let n_val = ((n as f64 * val_fraction).ceil() as usize).clamp(1, n - 1);
    Ok(harness::sweep_prompts(&sequences[n - n_val..], n_prompts, prompt_len)?)
}

pub fn targets(n_axes: usize) -> Vec<Target> {
    (0..n_axes).map(Target::AdapterAxis).chain(Metric::ALL.into_iter().map(Target::Metric)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub vector: String,
    pub layer: usize,
    /// "raw" or "ppl_matched"
    pub analysis: String,
    pub report: EffectReport,
}

/// Raw and perplexity-matched effects for every target.
pub fn sweep_effects(name: &str, sweep: &SweepResult, targets: &[Target], n_perm: usize, seed: u64) -> Result<Vec<EffectRow>> {
    let mut rows = Vec::new();
    for (i, &t) in targets.iter().enumerate() {
        let s = derive_seed(seed, i as u64);
        rows.push(EffectRow {
            vector: name.into(),
            layer: sweep.layer,
            analysis: "raw".into(),
            report: harness::evaluate(&sweep.records, t, n_perm, s)?,
        });
        rows.push(EffectRow {
            vector: name.into(),
            layer: sweep.layer,
            analysis: "ppl_matched".into(),
            report: harness::ppl_match(&sweep.records, t, n_perm, derive_seed(s, 1))?,
        });
    }
    Ok(rows)
}
