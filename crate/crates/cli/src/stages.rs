// SPDX-License-Identifier: MIT OR Apache-2.0

//! File-based stages. Each stage reads prior artifacts under the output root,
//! writes its own directory and a manifest, and is skipped when its manifest
//! is current unless forced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use neuraxis::adapter::{Adapter, SteeringVector};
use neuraxis::atlas::{split_half, Provenance, WordAtlas};
use neuraxis::axes::{AxisBasis, Statistic, ValidationReport};
use neuraxis::harness::{self, fdr_summary, EffectReport, GenerationRecord, GridEntry, SweepResult};
use neuraxis::signal::{ConnectivityStateSequence, Method, PcaBasis, Recording};
use neuraxis::steermodel::{train_toy_lm, ModelWeights};
use neuraxis::synthgen::{gen_corpus, gen_lexicon, gen_recording, gen_word_stream, plant_truth, Corpus, Lexicon, PlantedTruth, WordEvent};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{fmt_f64, parse_f64, read_csv, read_json, write_csv, write_json, Dtype, MatrixArchive};
use crate::manifest::{digests, RunManifest};
use crate::pipeline::{self, EffectRow, LayerVectors, PlantedMatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Connectivity,
    Atlas,
    Axes,
    Validate,
    TrainLm,
    Adapter,
    Steer,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Connectivity,
        Stage::Atlas,
        Stage::Axes,
        Stage::Validate,
        Stage::TrainLm,
        Stage::Adapter,
        Stage::Steer,
        Stage::Report,
    ];

    /// Config sections the stage reads.
    pub fn sections(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &["synth", "model"],
            Stage::Connectivity => &["signal"],
            Stage::Atlas => &["atlas"],
            Stage::Axes | Stage::Validate => &["axes"],
            Stage::TrainLm => &["model"],
            Stage::Adapter => &["adapter"],
            Stage::Steer => &["sweep", "model", "adapter"],
            Stage::Report => &["sweep", "adapter"],
        }
    }

    /// Subcommand and directory name.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Connectivity => "connectivity",
            Stage::Atlas => "atlas",
            Stage::Axes => "axes",
            Stage::Validate => "validate",
            Stage::TrainLm => "train-lm",
            Stage::Adapter => "adapter",
            Stage::Steer => "steer",
            Stage::Report => "report",
        }
    }
}

pub struct Ctx {
    pub root: PathBuf,
    pub cfg: RunConfig,
    pub hash: String,
    pub force: bool,
    pub quiet: bool,
}

impl Ctx {
    pub fn new(root: PathBuf, cfg: RunConfig, force: bool, quiet: bool) -> Self {
        let hash = cfg.hash();
        Ctx { root, cfg, hash, force, quiet }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[neuraxis] {msg}");
        }
    }
}

struct Outcome {
    outputs: Vec<String>,
    summary: serde_json::Value,
    timings: BTreeMap<String, f64>,
}

struct Timer(BTreeMap<String, f64>, Instant);

impl Timer {
    fn new() -> Self {
        Timer(BTreeMap::new(), Instant::now())
    }

    fn lap(&mut self, step: &str) {
        self.0.insert(step.to_string(), self.1.elapsed().as_secs_f64());
        self.1 = Instant::now();
    }
}

/// Run one stage; returns false when it was skipped as current.
pub fn run_stage(ctx: &Ctx, stage: Stage) -> Result<bool> {
    let inputs = stage_inputs(ctx, stage)?;
    for rel in &inputs {
        if !ctx.path(rel).is_file() {
            return Err(CliError::MissingInput(ctx.path(rel)));
        }
    }
    let stage_hash = ctx.cfg.section_hash(stage.sections());
    if !ctx.force {
        if let Ok(m) = RunManifest::load(&ctx.root, stage.name()) {
            if m.is_current(&ctx.root, &stage_hash, &inputs) {
                ctx.log(&format!("{}: up to date", stage.name()));
                return Ok(false);
            }
        }
    }
    ctx.log(&format!("{}: running", stage.name()));
    let input_digests = digests(&ctx.root, &inputs)?;
    crate::io::ensure_dir(&ctx.path(stage.name()))?;
    let t0 = Instant::now();
    let mut out = match stage {
        Stage::Synth => synth(ctx)?,
        Stage::Connectivity => connectivity(ctx)?,
        Stage::Atlas => atlas(ctx)?,
        Stage::Axes => axes(ctx)?,
        Stage::Validate => validate(ctx)?,
        Stage::TrainLm => train_lm(ctx)?,
        Stage::Adapter => adapter(ctx)?,
        Stage::Steer => steer(ctx)?,
        Stage::Report => report(ctx)?,
    };
    out.timings.insert("total".into(), t0.elapsed().as_secs_f64());
    let manifest = RunManifest {
        stage: stage.name().into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: ctx.hash.clone(),
        stage_hash,
        master_seed: ctx.cfg.master_seed,
        inputs: input_digests,
        outputs: digests(&ctx.root, &out.outputs)?,
        timings_s: out.timings,
        summary: out.summary,
    };
    manifest.save(&ctx.root)?;
    ctx.log(&format!("{}: done in {:.1} s", stage.name(), t0.elapsed().as_secs_f64()));
    Ok(true)
}

fn upstream(ctx: &Ctx, stage: Stage, prefix: &str) -> Result<Vec<String>> {
    let path = RunManifest::path(&ctx.root, stage.name());
    if !path.is_file() {
        return Err(CliError::MissingInput(path));
    }
    Ok(RunManifest::load(&ctx.root, stage.name())?.outputs_with_prefix(prefix))
}

fn layers(ctx: &Ctx) -> &[usize] {
    &ctx.cfg.adapter.layers
}

fn stage_inputs(ctx: &Ctx, stage: Stage) -> Result<Vec<String>> {
    let mut v: Vec<String> = match stage {
        Stage::Synth => vec![],
        Stage::Connectivity => upstream(ctx, Stage::Synth, "synth/recordings/")?,
        Stage::Atlas => {
            let mut v = upstream(ctx, Stage::Connectivity, "connectivity/states/")?;
            v.extend(upstream(ctx, Stage::Synth, "synth/words_run")?);
            v
        }
        Stage::Axes => vec!["atlas/atlas.bin".into(), "atlas/subject_atlases.bin".into(), "synth/truth.json".into()],
        Stage::Validate => vec!["axes/axes.bin".into(), "synth/lexicon.json".into()],
        Stage::TrainLm => vec!["synth/corpus.json".into()],
        Stage::Adapter => {
            let mut v = vec![
                "train-lm/model.bin".into(),
                "axes/axes.bin".into(),
                "validate/axis_validation.csv".into(),
                "synth/lexicon.json".into(),
            ];
            v.extend(upstream(ctx, Stage::Synth, "synth/words_run")?);
            v
        }
        Stage::Steer => {
            let mut v = vec!["train-lm/model.bin".into(), "synth/corpus.json".into(), "synth/lexicon.json".into()];
            for l in layers(ctx) {
                v.push(format!("adapter/adapter_L{l}.bin"));
                v.push(format!("adapter/vectors_L{l}.json"));
            }
            v
        }
        Stage::Report => {
            let mut v = vec!["steer/effects.csv".into(), "axes/planted_match.csv".into()];
            for l in layers(ctx) {
                v.push(format!("adapter/vectors_L{l}.json"));
            }
            v
        }
    };
    v.dedup();
    Ok(v)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub const WORDS_HEADER: [&str; 7] = ["onset_s", "offset_s", "word_id", "token", "logfreq", "pos_id", "emb_change"];

fn recording_rel(s: usize, r: usize) -> String {
    format!("synth/recordings/sub-{s:02}_run-{r:02}.bin")
}

fn words_rel(r: usize) -> String {
    format!("synth/words_run{r}.csv")
}

pub fn write_words(path: &Path, events: &[WordEvent]) -> Result<()> {
    let rows: Vec<Vec<String>> = events
        .iter()
        .map(|e| {
            vec![
                fmt_f64(e.onset),
                fmt_f64(e.offset),
                e.word_id.to_string(),
                e.token.clone(),
                fmt_f64(e.logfreq),
                e.pos_id.to_string(),
                fmt_f64(e.emb_change),
            ]
        })
        .collect();
    write_csv(path, &WORDS_HEADER, &rows)
}

pub fn read_words(path: &Path) -> Result<Vec<WordEvent>> {
    read_csv(path, &WORDS_HEADER)?
        .into_iter()
        .map(|r| {
            let int = |s: &str| s.parse::<u32>().map_err(|_| CliError::format(path, format!("bad integer '{s}'")));
            Ok(WordEvent {
                onset: parse_f64(path, &r[0])?,
                offset: parse_f64(path, &r[1])?,
                word_id: int(&r[2])?,
                token: r[3].clone(),
                logfreq: parse_f64(path, &r[4])?,
                pos_id: int(&r[5])? as u8,
                emb_change: parse_f64(path, &r[6])?,
            })
        })
        .collect()
}

fn recording_archive(rec: &Recording, subject: usize, run: usize) -> MatrixArchive {
    let mut a = MatrixArchive::new(json!({
        "kind": "recording",
        "subject": subject,
        "run": run,
        "subject_id": rec.subject_id,
        "run_id": rec.run_id,
        "sfreq": rec.sfreq,
        "channel_names": rec.channel_names,
    }));
    a.push("samples", Dtype::F32, rec.samples.clone());
    a
}

pub fn load_recording(path: &Path) -> Result<Recording> {
    let mut a = MatrixArchive::load(path)?;
    let meta = a.meta.clone();
    let samples = a.take(path, "samples")?;
    let names: Vec<String> = serde_json::from_value(meta["channel_names"].clone()).map_err(|e| CliError::format(path, e))?;
    let sfreq = meta["sfreq"].as_f64().ok_or_else(|| CliError::format(path, "missing sfreq"))?;
    let s = |k: &str| meta[k].as_str().unwrap_or_default().to_string();
    Ok(Recording::new(samples, sfreq, names, s("subject_id"), s("run_id"))?)
}

fn synth(ctx: &Ctx) -> Result<Outcome> {
    let spec = ctx.cfg.synth_spec();
    let mut t = Timer::new();
    let lex = gen_lexicon(&spec)?;
    let truth = plant_truth(&spec, &lex)?;
    let streams: Vec<Vec<WordEvent>> = (0..spec.n_runs).map(|r| gen_word_stream(&spec, &lex, r)).collect::<neuraxis::error::Result<_>>()?;
    let corpus = gen_corpus(&spec, &lex, &ctx.cfg.model.corpus)?;
    t.lap("words");
    let mut outputs = vec![
        "synth/lexicon.json".to_string(),
        "synth/labels.csv".into(),
        "synth/truth.json".into(),
        "synth/corpus.json".into(),
    ];
    write_json(&ctx.path("synth/lexicon.json"), &lex)?;
    let label_rows: Vec<Vec<String>> = lex
        .labels
        .iter()
        .map(|l| {
            vec![
                l.word_id.to_string(),
                l.token.clone(),
                fmt_f64(l.logfreq),
                l.pos_id.to_string(),
                l.function.to_string(),
                l.noun.to_string(),
                l.animate.to_string(),
                fmt_f64(l.concreteness),
                fmt_f64(l.length),
            ]
        })
        .collect();
    write_csv(
        &ctx.path("synth/labels.csv"),
        &["word_id", "token", "logfreq", "pos_id", "function", "noun", "animate", "concreteness", "length"],
        &label_rows,
    )?;
    write_json(&ctx.path("synth/truth.json"), &truth)?;
    write_json(&ctx.path("synth/corpus.json"), &corpus)?;
    for (r, ev) in streams.iter().enumerate() {
        write_words(&ctx.path(&words_rel(r)), ev)?;
        outputs.push(words_rel(r));
    }
    let cells: Vec<(usize, usize)> = (0..spec.n_subjects).flat_map(|s| (0..spec.n_runs).map(move |r| (s, r))).collect();
    cells.par_iter().try_for_each(|&(s, r)| -> Result<()> {
        let rec = gen_recording(&spec, &truth, &streams[r], s, r)?;
        recording_archive(&rec, s, r).save(&ctx.path(&recording_rel(s, r)))
    })?;
    outputs.extend(cells.iter().map(|&(s, r)| recording_rel(s, r)));
    t.lap("recordings");
    Ok(Outcome {
        outputs,
        summary: json!({
            "n_subjects": spec.n_subjects,
            "n_runs": spec.n_runs,
            "n_words_per_run": streams.iter().map(Vec::len).collect::<Vec<_>>(),
            "corpus_tokens": corpus.n_tokens(),
            "corpus_empty": corpus.empty,
            "feature_axis_map": truth.feature_axis_map,
        }),
        timings: t.0,
    })
}

// ---------------------------------------------------------------------------
// connectivity
// ---------------------------------------------------------------------------

fn states_rel(s: usize, r: usize) -> String {
    format!("connectivity/states/sub-{s:02}_run-{r:02}.bin")
}

fn subject_run(path: &Path, meta: &serde_json::Value) -> Result<(usize, usize)> {
    let g = |k: &str| meta[k].as_u64().map(|v| v as usize).ok_or_else(|| CliError::format(path, format!("missing {k}")));
    Ok((g("subject")?, g("run")?))
}

fn connectivity(ctx: &Ctx) -> Result<Outcome> {
    let sc = &ctx.cfg.signal;
    let mut t = Timer::new();
    let files = upstream(ctx, Stage::Synth, "synth/recordings/")?;
    let edges: Vec<((usize, usize), neuraxis::signal::EdgeSequence)> = files
        .par_iter()
        .map(|rel| {
            let p = ctx.path(rel);
            let meta = MatrixArchive::load(&p)?.meta;
            let rec = load_recording(&p)?;
            Ok((subject_run(&p, &meta)?, pipeline::edges_of(&rec, sc.band, &sc.window, sc.method)?))
        })
        .collect::<Result<_>>()?;
    t.lap("edges");
    let (keys, seqs): (Vec<_>, Vec<_>) = edges.into_iter().unzip();
    let states = pipeline::states_of(&seqs, sc.pca_k)?;
    t.lap("pca");
    let mut outputs = Vec::new();
    for (&(s, r), st) in keys.iter().zip(&states) {
        let mut a = MatrixArchive::new(json!({
            "kind": "connectivity_states",
            "subject": s,
            "run": r,
            "method": st.method.to_string(),
            "window": sc.window,
            "band": sc.band,
            "state_dim": st.states.ncols(),
            "explained_variance": st.pca.explained_variance.as_slice(),
        }));
        a.push("states", Dtype::F32, st.states.clone());
        a.push("window_times", Dtype::F64, DMatrix::from_column_slice(st.window_times.len(), 1, &st.window_times));
        a.save(&ctx.path(&states_rel(s, r)))?;
        outputs.push(states_rel(s, r));
    }
    let pca = &states[0].pca;
    let mut a = MatrixArchive::new(json!({"kind": "pca", "total_variance": pca.total_variance}));
    a.push("basis", Dtype::F64, pca.basis.clone());
    a.push("mean", Dtype::F64, DMatrix::from_column_slice(pca.mean.len(), 1, pca.mean.as_slice()));
    a.push(
        "explained_variance",
        Dtype::F64,
        DMatrix::from_column_slice(pca.explained_variance.len(), 1, pca.explained_variance.as_slice()),
    );
    a.save(&ctx.path("connectivity/pca.bin"))?;
    outputs.push("connectivity/pca.bin".into());
    Ok(Outcome {
        outputs,
        summary: json!({
            "method": sc.method.to_string(),
            "state_dim": pca.state_dim(),
            "explained_ratio": pca.explained_ratio(),
            "n_windows": states.iter().map(|s| s.states.nrows()).sum::<usize>(),
        }),
        timings: t.0,
    })
}

pub fn load_states(ctx: &Ctx) -> Result<Vec<Vec<ConnectivityStateSequence>>> {
    let files = upstream(ctx, Stage::Connectivity, "connectivity/states/")?;
    let mut grid: BTreeMap<usize, BTreeMap<usize, ConnectivityStateSequence>> = BTreeMap::new();
    for rel in files {
        let p = ctx.path(&rel);
        let mut a = MatrixArchive::load(&p)?;
        let (s, r) = subject_run(&p, &a.meta)?;
        let method: Method = a.meta["method"].as_str().unwrap_or("plv").parse()?;
        let states = a.take(&p, "states")?;
        let times = a.take(&p, "window_times")?;
        let empty = PcaBasis { basis: DMatrix::zeros(0, 0), mean: DVector::zeros(0), explained_variance: DVector::zeros(0), total_variance: 0.0 };
        grid.entry(s).or_default().insert(
            r,
            ConnectivityStateSequence { window_times: times.iter().copied().collect(), states, method, pca: empty },
        );
    }
    Ok(grid.into_values().map(|runs| runs.into_values().collect()).collect())
}

pub fn load_streams(ctx: &Ctx) -> Result<Vec<Vec<WordEvent>>> {
    let files = upstream(ctx, Stage::Synth, "synth/words_run")?;
    let mut by_run: Vec<(usize, Vec<WordEvent>)> = files
        .iter()
        .map(|rel| {
            let r: usize = rel
                .trim_start_matches("synth/words_run")
                .trim_end_matches(".csv")
                .parse()
                .map_err(|_| CliError::format(&ctx.path(rel), "cannot parse run index"))?;
            Ok((r, read_words(&ctx.path(rel))?))
        })
        .collect::<Result<_>>()?;
    by_run.sort_by_key(|x| x.0);
    Ok(by_run.into_iter().map(|x| x.1).collect())
}

// ---------------------------------------------------------------------------
// atlas
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AtlasMeta {
    word_ids: Vec<u32>,
    counts: Vec<usize>,
    provenance: Provenance,
    dropped_windows: usize,
}

fn atlas_meta(a: &WordAtlas) -> AtlasMeta {
    AtlasMeta { word_ids: a.word_ids.clone(), counts: a.counts.clone(), provenance: a.provenance.clone(), dropped_windows: a.dropped_windows }
}

fn atlas_from(meta: AtlasMeta, atlas: DMatrix<f64>) -> WordAtlas {
    WordAtlas { word_ids: meta.word_ids, atlas, counts: meta.counts, provenance: meta.provenance, dropped_windows: meta.dropped_windows }
}

pub fn load_atlas(path: &Path) -> Result<WordAtlas> {
    let mut a = MatrixArchive::load(path)?;
    let meta: AtlasMeta = serde_json::from_value(a.meta.clone()).map_err(|e| CliError::format(path, e))?;
    Ok(atlas_from(meta, a.take(path, "atlas")?))
}

pub fn load_subject_atlases(path: &Path) -> Result<Vec<WordAtlas>> {
    let a = MatrixArchive::load(path)?;
    let metas: Vec<AtlasMeta> = serde_json::from_value(a.meta["subjects"].clone()).map_err(|e| CliError::format(path, e))?;
    if metas.len() != a.matrices.len() {
        return Err(CliError::format(path, "subject metadata and matrices differ in count"));
    }
    Ok(metas.into_iter().zip(a.matrices).map(|(m, (_, _, x))| atlas_from(m, x)).collect())
}

fn atlas(ctx: &Ctx) -> Result<Outcome> {
    let mut t = Timer::new();
    let states = load_states(ctx)?;
    let streams = load_streams(ctx)?;
    t.lap("load");
    let out = pipeline::build_atlases(&states, &streams, &ctx.cfg.atlas)?;
    t.lap("fit");
    let mut a = MatrixArchive::new(serde_json::to_value(atlas_meta(&out.atlas)).unwrap());
    a.push("atlas", Dtype::F32, out.atlas.atlas.clone());
    a.save(&ctx.path("atlas/atlas.bin"))?;
    let mut subj = MatrixArchive::new(json!({"subjects": out.subject_atlases.iter().map(atlas_meta).collect::<Vec<_>>()}));
    for (i, s) in out.subject_atlases.iter().enumerate() {
        subj.push(format!("sub-{i:02}"), Dtype::F32, s.atlas.clone());
    }
    subj.save(&ctx.path("atlas/subject_atlases.bin"))?;
    let lex: Lexicon = read_json(&ctx.path("synth/lexicon.json"))?;
    let rows: Vec<Vec<String>> = out
        .atlas
        .word_ids
        .iter()
        .zip(&out.atlas.counts)
        .map(|(&w, &c)| {
            let n_sub = out.subject_atlases.iter().filter(|s| s.row_of(w).is_some()).count();
            vec![w.to_string(), lex.labels[w as usize].token.clone(), c.to_string(), n_sub.to_string()]
        })
        .collect();
    write_csv(&ctx.path("atlas/atlas_summary.csv"), &["word_id", "token", "count", "n_subjects"], &rows)?;
    let models: Vec<_> = out
        .models
        .iter()
        .enumerate()
        .map(|(i, m)| json!({"subject": i, "alpha": m.alpha, "cv_table": m.cv_table}))
        .collect();
    write_json(&ctx.path("atlas/state_models.json"), &models)?;
    Ok(Outcome {
        outputs: vec![
            "atlas/atlas.bin".into(),
            "atlas/subject_atlases.bin".into(),
            "atlas/atlas_summary.csv".into(),
            "atlas/state_models.json".into(),
        ],
        summary: json!({
            "n_words": out.atlas.n_words(),
            "state_dim": out.atlas.state_dim(),
            "features": ctx.cfg.atlas.features,
            "alphas": out.models.iter().map(|m| m.alpha).collect::<Vec<_>>(),
        }),
        timings: t.0,
    })
}

// ---------------------------------------------------------------------------
// axes
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AxesMeta {
    n_axes: usize,
    requested_n_axes: usize,
    seed: u64,
    converged: bool,
    iterations: usize,
    delta: f64,
    restarts: usize,
    word_ids: Vec<u32>,
}

pub fn save_axes(path: &Path, b: &AxisBasis, requested: usize) -> Result<()> {
    let meta = AxesMeta {
        n_axes: b.n_axes(),
        requested_n_axes: requested,
        seed: b.seed,
        converged: b.converged,
        iterations: b.iterations,
        delta: b.delta,
        restarts: b.restarts,
        word_ids: b.word_ids.clone(),
    };
    let mut a = MatrixArchive::new(serde_json::to_value(meta).unwrap());
    a.push("unmixing", Dtype::F64, b.unmixing.clone());
    a.push("mixing", Dtype::F64, b.mixing.clone());
    a.push("mean", Dtype::F64, DMatrix::from_column_slice(b.mean.len(), 1, b.mean.as_slice()));
    a.push("scores", Dtype::F64, b.scores.clone());
    a.save(path)
}

pub fn load_axes(path: &Path) -> Result<AxisBasis> {
    let mut a = MatrixArchive::load(path)?;
    let m: AxesMeta = serde_json::from_value(a.meta.clone()).map_err(|e| CliError::format(path, e))?;
    let mean = a.take(path, "mean")?;
    Ok(AxisBasis {
        unmixing: a.take(path, "unmixing")?,
        mixing: a.take(path, "mixing")?,
        mean: DVector::from_column_slice(mean.as_slice()),
        word_ids: m.word_ids,
        scores: a.take(path, "scores")?,
        converged: m.converged,
        iterations: m.iterations,
        delta: m.delta,
        restarts: m.restarts,
        seed: m.seed,
    })
}

pub const PLANTED_HEADER: [&str; 4] = ["planted_axis", "feature", "ica_axis", "r"];

pub fn read_planted(path: &Path) -> Result<Vec<PlantedMatch>> {
    read_csv(path, &PLANTED_HEADER)?
        .into_iter()
        .map(|r| {
            let int = |s: &str| s.parse::<usize>().map_err(|_| CliError::format(path, "bad index"));
            Ok(PlantedMatch { planted_axis: int(&r[0])?, feature: r[1].clone(), ica_axis: int(&r[2])?, r: parse_f64(path, &r[3])? })
        })
        .collect()
}

fn axes(ctx: &Ctx) -> Result<Outcome> {
    let mut t = Timer::new();
    let atlas = load_atlas(&ctx.path("atlas/atlas.bin"))?;
    let subjects = load_subject_atlases(&ctx.path("atlas/subject_atlases.bin"))?;
    let truth: PlantedTruth = read_json(&ctx.path("synth/truth.json"))?;
    let ica = ctx.cfg.ica_config();
    let basis = pipeline::fit_axes(&atlas, &ctx.cfg.axes, &ica)?;
    t.lap("ica");
    save_axes(&ctx.path("axes/axes.bin"), &basis, ica.n_axes)?;
    let header: Vec<String> = std::iter::once("word_id".to_string()).chain((0..basis.n_axes()).map(|k| format!("axis_{k}"))).collect();
    let rows: Vec<Vec<String>> = basis
        .word_ids
        .iter()
        .enumerate()
        .map(|(i, w)| std::iter::once(w.to_string()).chain(basis.scores.row(i).iter().map(|&v| fmt_f64(v))).collect())
        .collect();
    write_csv(&ctx.path("axes/axis_scores.csv"), &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    let planted = pipeline::planted_match(&truth, &basis)?;
    let rows: Vec<Vec<String>> = planted
        .iter()
        .map(|p| vec![p.planted_axis.to_string(), p.feature.clone(), p.ica_axis.to_string(), fmt_f64(p.r)])
        .collect();
    write_csv(&ctx.path("axes/planted_match.csv"), &PLANTED_HEADER, &rows)?;
    t.lap("match");
    let mut outputs = vec!["axes/axes.bin".to_string(), "axes/axis_scores.csv".into(), "axes/planted_match.csv".into()];
    let mut split_summary = serde_json::Value::Null;
    if subjects.len() >= 4 {
        let split = split_half(&subjects, |a| pipeline::fit_axes(a, &ctx.cfg.axes, &ica).map_err(|e| match e {
            CliError::Core(c) => c,
            other => neuraxis::error::Error::InvalidInput(other.to_string()),
        }))?;
        split_summary = json!(split.axes.iter().map(|a| a.mean).collect::<Vec<_>>());
        write_json(&ctx.path("axes/split_half.json"), &split)?;
        outputs.push("axes/split_half.json".into());
        t.lap("split_half");
    }
    Ok(Outcome {
        outputs,
        summary: json!({
            "n_axes": basis.n_axes(),
            "converged": basis.converged,
            "planted_abs_r": planted.iter().map(|p| p.r.abs()).collect::<Vec<_>>(),
            "split_half_mean_abs_r": split_summary,
        }),
        timings: t.0,
    })
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

pub const VALIDATION_HEADER: [&str; 10] = ["axis", "label", "stat", "estimate", "ci_low", "ci_high", "perm_p", "n", "q", "dropped"];

pub fn read_validation(path: &Path) -> Result<Vec<ValidationReport>> {
    read_csv(path, &VALIDATION_HEADER)?
        .into_iter()
        .map(|r| {
            let int = |s: &str| s.parse::<usize>().map_err(|_| CliError::format(path, "bad integer"));
            let statistic = match r[2].as_str() {
                "r" => Statistic::R,
                "d" => Statistic::D,
                "residual_d" => Statistic::ResidualD,
                "matched_d" => Statistic::MatchedD,
                s => return Err(CliError::format(path, format!("unknown statistic '{s}'"))),
            };
            Ok(ValidationReport {
                axis: int(&r[0])?,
                label: r[1].clone(),
                statistic,
                estimate: parse_f64(path, &r[3])?,
                ci_low: parse_f64(path, &r[4])?,
                ci_high: parse_f64(path, &r[5])?,
                perm_p: parse_f64(path, &r[6])?,
                n: int(&r[7])?,
                q: if r[8].is_empty() { None } else { Some(parse_f64(path, &r[8])?) },
                dropped: int(&r[9])?,
            })
        })
        .collect()
}

fn validate(ctx: &Ctx) -> Result<Outcome> {
    let mut t = Timer::new();
    let basis = load_axes(&ctx.path("axes/axes.bin"))?;
    let lex: Lexicon = read_json(&ctx.path("synth/lexicon.json"))?;
    let reports = pipeline::validate_axes(&basis, &lex, &ctx.cfg.validation_config(), ctx.cfg.axes.fdr_q)?;
    t.lap("validate");
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.axis.to_string(),
                r.label.clone(),
                r.statistic.as_str().into(),
                fmt_f64(r.estimate),
                fmt_f64(r.ci_low),
                fmt_f64(r.ci_high),
                fmt_f64(r.perm_p),
                r.n.to_string(),
                r.q.map(fmt_f64).unwrap_or_default(),
                r.dropped.to_string(),
            ]
        })
        .collect();
    write_csv(&ctx.path("validate/axis_validation.csv"), &VALIDATION_HEADER, &rows)?;
    let (axis, r) = pipeline::frequency_axis(&reports)?;
    Ok(Outcome {
        outputs: vec!["validate/axis_validation.csv".into()],
        summary: json!({"rows": reports.len(), "frequency_axis": axis, "frequency_axis_r": r}),
        timings: t.0,
    })
}

// ---------------------------------------------------------------------------
// train-lm
// ---------------------------------------------------------------------------

fn train_lm(ctx: &Ctx) -> Result<Outcome> {
    let mut t = Timer::new();
    let corpus: Corpus = read_json(&ctx.path("synth/corpus.json"))?;
    let (w, rep) = train_toy_lm(&corpus, &ctx.cfg.model_config(), &ctx.cfg.train_spec())?;
    t.lap("train");
    w.save(&ctx.path("train-lm/model.bin"))?;
    write_json(&ctx.path("train-lm/train_report.json"), &rep)?;
    Ok(Outcome {
        outputs: vec!["train-lm/model.bin".into(), "train-lm/train_report.json".into()],
        summary: json!({
            "val_perplexity": rep.val_perplexity,
            "unigram_perplexity": rep.unigram_perplexity,
            "n_params": w.n_params(),
        }),
        timings: t.0,
    })
}

// ---------------------------------------------------------------------------
// adapter
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    layer: usize,
    alpha: Vec<f64>,
    fit_report: Vec<f64>,
    n_train: usize,
    n_holdout: usize,
}

pub fn save_adapter(path: &Path, a: &Adapter) -> Result<()> {
    let meta = AdapterMeta { layer: a.layer, alpha: a.alpha.clone(), fit_report: a.fit_report.clone(), n_train: a.n_train, n_holdout: a.n_holdout };
    let mut ar = MatrixArchive::new(serde_json::to_value(meta).unwrap());
    let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    ar.push("w", Dtype::F64, a.w.clone());
    ar.push("b", Dtype::F64, col(&a.b));
    ar.push("feature_mean", Dtype::F64, col(&a.feature_mean));
    ar.push("feature_sd", Dtype::F64, col(&a.feature_sd));
    ar.save(path)
}

pub fn load_adapter(path: &Path) -> Result<Adapter> {
    let mut ar = MatrixArchive::load(path)?;
    let m: AdapterMeta = serde_json::from_value(ar.meta.clone()).map_err(|e| CliError::format(path, e))?;
    let mut vec = |name: &str| -> Result<DVector<f64>> { Ok(DVector::from_column_slice(ar.take(path, name)?.as_slice())) };
    let b = vec("b")?;
    let feature_mean = vec("feature_mean")?;
    let feature_sd = vec("feature_sd")?;
    Ok(Adapter {
        layer: m.layer,
        w: ar.take(path, "w")?,
        b,
        alpha: m.alpha,
        feature_mean,
        feature_sd,
        fit_report: m.fit_report,
        n_train: m.n_train,
        n_holdout: m.n_holdout,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedVector {
    pub name: String,
    pub vector: SteeringVector,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cosine {
    pub a: String,
    pub b: String,
    pub cosine: f64,
}

/// Everything the steer and report stages need from one layer's adapter fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VectorsFile {
    pub layer: usize,
    pub brain_axis: usize,
    /// Pearson r of the brain axis with log-frequency over atlas words.
    pub brain_axis_logfreq_r: f64,
    /// Held-out adapter r of the brain axis.
    pub brain_axis_fit_r: f64,
    pub text_probe_fit_r: f64,
    pub hidden_words: usize,
    pub dropped_tokens: usize,
    pub vectors: Vec<NamedVector>,
    pub cosines: Vec<Cosine>,
}

impl VectorsFile {
    fn from_layer(lv: &LayerVectors, r: f64) -> Self {
        VectorsFile {
            layer: lv.layer,
            brain_axis: lv.brain_axis,
            brain_axis_logfreq_r: r,
            brain_axis_fit_r: lv.adapter.fit_report[lv.brain_axis],
            text_probe_fit_r: lv.text_probe_adapter.fit_report[0],
            hidden_words: lv.table.word_ids.len(),
            dropped_tokens: lv.table.dropped,
            vectors: lv.vectors.iter().map(|(n, v)| NamedVector { name: n.clone(), vector: v.clone() }).collect(),
            cosines: lv.cosines().into_iter().map(|(a, b, cosine)| Cosine { a, b, cosine }).collect(),
        }
    }

    pub fn vector(&self, name: &str) -> Option<&SteeringVector> {
        self.vectors.iter().find(|v| v.name == name).map(|v| &v.vector)
    }
}

fn adapter(ctx: &Ctx) -> Result<Outcome> {
    let mut t = Timer::new();
    let w = ModelWeights::load(&ctx.path("train-lm/model.bin"))?;
    let basis = load_axes(&ctx.path("axes/axes.bin"))?;
    let lex: Lexicon = read_json(&ctx.path("synth/lexicon.json"))?;
    let reports = read_validation(&ctx.path("validate/axis_validation.csv"))?;
    let stories = pipeline::story_tokens(&load_streams(ctx)?);
    let (axis, r) = pipeline::frequency_axis(&reports)?;
    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    for &layer in layers(ctx) {
        let lv = pipeline::layer_vectors(&w, &stories, &basis, &lex, axis, r.signum(), &ctx.cfg.adapter_config(layer))?;
        save_adapter(&ctx.path(&format!("adapter/adapter_L{layer}.bin")), &lv.adapter)?;
        let vf = VectorsFile::from_layer(&lv, r);
        write_json(&ctx.path(&format!("adapter/vectors_L{layer}.json")), &vf)?;
        outputs.push(format!("adapter/adapter_L{layer}.bin"));
        outputs.push(format!("adapter/vectors_L{layer}.json"));
        summary.push(json!({
            "layer": layer,
            "brain_axis": axis,
            "fit_report": lv.adapter.fit_report,
            "cosines": vf.cosines,
        }));
        t.lap(&format!("layer_{layer}"));
    }
    Ok(Outcome { outputs, summary: json!(summary), timings: t.0 })
}

// ---------------------------------------------------------------------------
// steer
// ---------------------------------------------------------------------------

pub const EFFECTS_HEADER: [&str; 14] = [
    "vector", "layer", "analysis", "target", "d", "perm_p", "strength_r", "ppl_d", "ppl_perm_p", "n_pos", "n_neg",
    "match_rate", "unreliable", "invalid",
];

fn effect_row(e: &EffectRow, invalid: usize) -> Vec<String> {
    let r = &e.report;
    vec![
        e.vector.clone(),
        e.layer.to_string(),
        e.analysis.clone(),
        r.target.clone(),
        fmt_f64(r.d),
        fmt_f64(r.perm_p),
        fmt_f64(r.strength_r),
        fmt_f64(r.ppl_d),
        fmt_f64(r.ppl_perm_p),
        r.n_pos.to_string(),
        r.n_neg.to_string(),
        r.match_rate.map(fmt_f64).unwrap_or_default(),
        r.unreliable.to_string(),
        invalid.to_string(),
    ]
}

pub fn read_effects(path: &Path) -> Result<Vec<EffectRow>> {
    read_csv(path, &EFFECTS_HEADER)?
        .into_iter()
        .map(|r| {
            let int = |s: &str| s.parse::<usize>().map_err(|_| CliError::format(path, "bad integer"));
            Ok(EffectRow {
                vector: r[0].clone(),
                layer: int(&r[1])?,
                analysis: r[2].clone(),
                report: EffectReport {
                    target: r[3].clone(),
                    d: parse_f64(path, &r[4])?,
                    perm_p: parse_f64(path, &r[5])?,
                    strength_r: parse_f64(path, &r[6])?,
                    ppl_d: parse_f64(path, &r[7])?,
                    ppl_perm_p: parse_f64(path, &r[8])?,
                    n_pos: int(&r[9])?,
                    n_neg: int(&r[10])?,
                    match_rate: if r[11].is_empty() { None } else { Some(parse_f64(path, &r[11])?) },
                    unreliable: r[12] == "true",
                },
            })
        })
        .collect()
}

fn record_row(name: &str, layer: usize, r: &GenerationRecord) -> Vec<String> {
    let mut v = vec![
        name.to_string(),
        layer.to_string(),
        r.prompt_id.to_string(),
        fmt_f64(r.strength),
        r.sample_id.to_string(),
        fmt_f64(r.ppl),
        fmt_f64(r.metrics.logfreq_mean),
        fmt_f64(r.metrics.function_ratio),
        fmt_f64(r.metrics.animate_rate),
        fmt_f64(r.metrics.noun_ratio),
        r.metrics.n_labeled.to_string(),
        r.truncated.to_string(),
    ];
    v.extend(r.adapter_scores.iter().map(|&x| fmt_f64(x)));
    v
}

fn steer(ctx: &Ctx) -> Result<Outcome> {
    let mut t = Timer::new();
    let w = ModelWeights::load(&ctx.path("train-lm/model.bin"))?;
    let corpus: Corpus = read_json(&ctx.path("synth/corpus.json"))?;
    let lex: Lexicon = read_json(&ctx.path("synth/lexicon.json"))?;
    let sc = &ctx.cfg.sweep;
    let prompts = pipeline::heldout_prompts(&corpus.sequences, ctx.cfg.model.train.val_fraction, sc.n_prompts, sc.prompt_len)?;
    let mut records = Vec::new();
    let mut tokens = Vec::new();
    let mut effects = Vec::new();
    let mut n_axes = 0;
    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    for &layer in layers(ctx) {
        let adapter = load_adapter(&ctx.path(&format!("adapter/adapter_L{layer}.bin")))?;
        let vf: VectorsFile = read_json(&ctx.path(&format!("adapter/vectors_L{layer}.json")))?;
        n_axes = adapter.n_axes();
        let lv_vectors: Vec<(String, SteeringVector)> = vf.vectors.iter().map(|v| (v.name.clone(), v.vector.clone())).collect();
        let plans = pipeline::sweep_plans(
            layer,
            &lv_vectors,
            sc.random_control,
            sc.run_actadd,
            sc.run_text_probe,
            ctx.cfg.stage_seed("random_control", sc.seed),
        );
        let spec = ctx.cfg.sweep_spec(layer);
        let targets = pipeline::targets(adapter.n_axes());
        for (name, plan) in plans {
            let sweep: SweepResult = harness::run_sweep(&w, &adapter, &lex, &prompts, &plan, &spec)?;
            t.lap(&format!("sweep_{name}_L{layer}"));
            let rows = pipeline::sweep_effects(&name, &sweep, &targets, spec.n_perm, neuraxis::rng::derive_seed(spec.seed, neuraxis::rng::tag(&name)))?;
            t.lap(&format!("effects_{name}_L{layer}"));
            for e in &rows {
                effects.push(effect_row(e, sweep.invalid));
            }
            let plot = harness::plot_data(&sweep, &targets)?;
            let plot_rel = format!("steer/plot_{name}_L{layer}.json");
            write_json(&ctx.path(&plot_rel), &plot)?;
            outputs.push(plot_rel);
            for r in &sweep.records {
                records.push(record_row(&name, layer, r));
                tokens.push(vec![
                    name.clone(),
                    layer.to_string(),
                    r.prompt_id.to_string(),
                    fmt_f64(r.strength),
                    r.sample_id.to_string(),
                    r.tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
                ]);
            }
            let headline = rows.iter().find(|e| e.analysis == "raw" && e.report.target == "logfreq_mean");
            summary.push(json!({
                "vector": name,
                "layer": layer,
                "plan": sweep.plan,
                "records": sweep.records.len(),
                "invalid": sweep.invalid,
                "logfreq_d": headline.map(|e| e.report.d),
                "logfreq_perm_p": headline.map(|e| e.report.perm_p),
            }));
        }
    }
    let mut header: Vec<String> = [
        "vector", "layer", "prompt_id", "strength", "sample_id", "ppl", "logfreq_mean", "function_ratio", "animate_rate",
        "noun_ratio", "n_labeled", "truncated",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..n_axes).map(|k| format!("adapter_axis_{k}")));
    write_csv(&ctx.path("steer/sweep_records.csv"), &header.iter().map(String::as_str).collect::<Vec<_>>(), &records)?;
    write_csv(
        &ctx.path("steer/sweep_tokens.csv"),
        &["vector", "layer", "prompt_id", "strength", "sample_id", "tokens"],
        &tokens,
    )?;
    write_csv(&ctx.path("steer/effects.csv"), &EFFECTS_HEADER, &effects)?;
    outputs.splice(0..0, ["steer/sweep_records.csv".to_string(), "steer/sweep_tokens.csv".into(), "steer/effects.csv".into()]);
    Ok(Outcome { outputs, summary: json!(summary), timings: t.0 })
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub const FDR_HEADER: [&str; 8] = ["model", "vector", "target", "layer", "d", "perm_p", "q_value", "significant"];

/// BH-FDR over the raw (unmatched) effect grid.
pub fn fdr_rows(effects: &[EffectRow], q: f64) -> Result<Vec<neuraxis::harness::FdrRow>> {
    let grid: Vec<GridEntry> = effects
        .iter()
        .filter(|e| e.analysis == "raw")
        .map(|e| GridEntry { model: "toy".into(), vector: e.vector.clone(), layer: e.layer, report: e.report.clone() })
        .collect();
    Ok(fdr_summary(&grid, q)?)
}

fn report(ctx: &Ctx) -> Result<Outcome> {
    let mut t = Timer::new();
    let effects = read_effects(&ctx.path("steer/effects.csv"))?;
    let planted = read_planted(&ctx.path("axes/planted_match.csv"))?;
    let fdr = fdr_rows(&effects, ctx.cfg.sweep.fdr_q)?;
    let rows: Vec<Vec<String>> = fdr
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.vector.clone(),
                r.target.clone(),
                r.layer.to_string(),
                fmt_f64(r.d),
                fmt_f64(r.perm_p),
                fmt_f64(r.q_value),
                r.significant.to_string(),
            ]
        })
        .collect();
    write_csv(&ctx.path("report/fdr_summary.csv"), &FDR_HEADER, &rows)?;
    let mut layers_out = Vec::new();
    for &l in layers(ctx) {
        let vf: VectorsFile = read_json(&ctx.path(&format!("adapter/vectors_L{l}.json")))?;
        let pick = |vector: &str, analysis: &str| {
            effects
                .iter()
                .find(|e| e.layer == l && e.vector == vector && e.analysis == analysis && e.report.target == "logfreq_mean")
                .map(|e| json!({"d": e.report.d, "perm_p": e.report.perm_p, "strength_r": e.report.strength_r, "match_rate": e.report.match_rate}))
        };
        layers_out.push(json!({
            "layer": l,
            "brain_axis": vf.brain_axis,
            "brain_axis_fit_r": vf.brain_axis_fit_r,
            "text_probe_fit_r": vf.text_probe_fit_r,
            "cosines": vf.cosines,
            "logfreq_effects": {
                "brain_axis": pick("brain_axis", "raw"),
                "brain_axis_ppl_matched": pick("brain_axis", "ppl_matched"),
                "random": pick("random", "raw"),
                "actadd": pick("actadd", "raw"),
                "text_probe": pick("text_probe", "raw"),
            },
        }));
    }
    let report = json!({
        "planted_match": planted,
        "n_significant": fdr.iter().filter(|r| r.significant).count(),
        "n_tests": fdr.len(),
        "layers": layers_out,
    });
    write_json(&ctx.path("report/report.json"), &report)?;
    t.lap("report");
    Ok(Outcome {
        outputs: vec!["report/fdr_summary.csv".into(), "report/report.json".into()],
        summary: json!({"n_significant": fdr.iter().filter(|r| r.significant).count(), "n_tests": fdr.len()}),
        timings: t.0,
    })
}
