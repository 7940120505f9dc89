// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration (TOML). Every field has a default and unknown keys are
//! rejected.

use std::path::Path;

use neuraxis::adapter::AdapterConfig;
use neuraxis::atlas::{default_alphas, DEFAULT_LAGS};
use neuraxis::axes::{IcaConfig, ValidationConfig};
use neuraxis::harness::SweepSpec;
use neuraxis::rng::{derive_path, tag};
use neuraxis::signal::{Method, WindowSpec};
use neuraxis::steermodel::{ModelConfig, TrainSpec};
use neuraxis::synthgen::{CorpusSpec, SynthSpec, FEATURES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every stage seed is derived from this and the stage's own `seed`.
    pub master_seed: u64,
    pub synth: SynthSpec,
    pub signal: SignalConfig,
    pub atlas: AtlasConfig,
    pub axes: AxesConfig,
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 7,
            synth: SynthSpec::default(),
            signal: SignalConfig::default(),
            atlas: AtlasConfig::default(),
            axes: AxesConfig::default(),
            model: ModelSection::default(),
            adapter: AdapterSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalConfig {
    pub band: (f64, f64),
    pub method: Method,
    pub window: WindowSpec,
    /// Edge-PCA dimension; clamped to the edge count.
    pub pca_k: usize,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig { band: (4.0, 8.0), method: Method::Plv, window: WindowSpec::default(), pca_k: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtlasConfig {
    pub lags_s: Vec<f64>,
    /// Feature names from the word table; drop one to build an ablated atlas.
    pub features: Vec<String>,
    pub alphas: Vec<f64>,
    pub n_folds: usize,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        AtlasConfig {
            lags_s: DEFAULT_LAGS.to_vec(),
            features: FEATURES.iter().map(|s| s.to_string()).collect(),
            alphas: default_alphas(),
            n_folds: 5,
        }
    }
}

impl AtlasConfig {
    pub fn feature_indices(&self) -> Result<Vec<usize>, CliError> {
        self.features
            .iter()
            .map(|f| {
                FEATURES
                    .iter()
                    .position(|g| g == f)
                    .ok_or_else(|| CliError::Config(format!("unknown atlas feature '{f}'")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AxesConfig {
    pub ica: IcaConfig,
    /// Cap the axis count at the atlas rank and a parallel-analysis floor.
    pub cap_at_noise_floor: bool,
    pub n_null: usize,
    pub validation: ValidationConfig,
    pub fdr_q: f64,
}

impl Default for AxesConfig {
    fn default() -> Self {
        AxesConfig {
            ica: IcaConfig::default(),
            cap_at_noise_floor: true,
            n_null: 50,
            validation: ValidationConfig::default(),
            fdr_q: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: ModelConfig,
    pub train: TrainSpec,
    pub corpus: CorpusSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    /// One adapter (and one set of sweeps) per layer.
    pub layers: Vec<usize>,
    pub alphas: Vec<f64>,
    pub holdout_frac: f64,
    pub n_folds: usize,
    pub n_top: usize,
    pub seed: u64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let a = AdapterConfig::default();
        AdapterSection {
            layers: vec![a.layer],
            alphas: a.alphas,
            holdout_frac: a.holdout_frac,
            n_folds: a.n_folds,
            n_top: a.n_top,
            seed: a.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomControl {
    /// A fresh direction per prompt.
    PerPrompt,
    /// One direction for the whole sweep.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub strengths: Vec<f64>,
    pub n_prompts: usize,
    pub samples_per_strength: usize,
    pub gen_tokens: usize,
    pub prompt_len: usize,
    pub temperature: f64,
    pub n_perm: usize,
    pub seed: u64,
    pub random_control: RandomControl,
    pub run_actadd: bool,
    pub run_text_probe: bool,
    pub fdr_q: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        let s = SweepSpec::default();
        SweepSection {
            strengths: s.strengths,
            n_prompts: s.n_prompts,
            samples_per_strength: s.samples_per_strength,
            gen_tokens: s.gen_tokens,
            prompt_len: s.prompt_len,
            temperature: s.temperature,
            n_perm: s.n_perm,
            seed: s.seed,
            random_control: RandomControl::PerPrompt,
            run_actadd: true,
            run_text_probe: true,
            fdr_q: 0.05,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let core = |e: neuraxis::error::Error| CliError::Config(e.to_string());
        self.synth.validate().map_err(core)?;
        self.signal.window.validate().map_err(core)?;
        self.model.arch.validate().map_err(core)?;
        self.atlas.feature_indices()?;
        if self.atlas.features.is_empty() {
            return Err(CliError::Config("atlas.features must not be empty".into()));
        }
        if self.adapter.layers.is_empty() {
            return Err(CliError::Config("adapter.layers must not be empty".into()));
        }
        if let Some(l) = self.adapter.layers.iter().find(|&&l| l > self.model.arch.n_layers) {
            return Err(CliError::Config(format!("adapter layer {l} > model n_layers {}", self.model.arch.n_layers)));
        }
        self.sweep_spec(self.adapter.layers[0]).validate().map_err(core)?;
        if self.model.arch.vocab_size < self.synth.vocab_size {
            return Err(CliError::Config("model.arch.vocab_size must cover synth.vocab_size".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Hash of the named sections only (`master_seed` is always included).
    pub fn section_hash(&self, sections: &[&str]) -> String {
        let all = serde_json::to_value(self).expect("config serializes");
        let mut picked = serde_json::Map::new();
        picked.insert("master_seed".into(), all["master_seed"].clone());
        for s in sections {
            picked.insert(s.to_string(), all[*s].clone());
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&picked).expect("json").as_slice()))
    }

    /// Effective seed of a stage.
    pub fn stage_seed(&self, stage: &str, local: u64) -> u64 {
        derive_path(self.master_seed, &[tag(stage), local])
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec { seed: self.stage_seed("synth", self.synth.seed), ..self.synth.clone() }
    }

    pub fn ica_config(&self) -> IcaConfig {
        IcaConfig { seed: self.stage_seed("ica", self.axes.ica.seed), ..self.axes.ica.clone() }
    }

    pub fn validation_config(&self) -> ValidationConfig {
        ValidationConfig { seed: self.stage_seed("validate", self.axes.validation.seed), ..self.axes.validation.clone() }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { seed: self.stage_seed("model", self.model.arch.seed), ..self.model.arch.clone() }
    }

    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec { seed: self.stage_seed("train", self.model.train.seed), ..self.model.train.clone() }
    }

    pub fn adapter_config(&self, layer: usize) -> AdapterConfig {
        AdapterConfig {
            layer,
            alphas: self.adapter.alphas.clone(),
            holdout_frac: self.adapter.holdout_frac,
            n_folds: self.adapter.n_folds,
            n_top: self.adapter.n_top,
            seed: self.stage_seed("adapter", self.adapter.seed),
        }
    }

    pub fn sweep_spec(&self, layer: usize) -> SweepSpec {
        let s = &self.sweep;
        SweepSpec {
            strengths: s.strengths.clone(),
            n_prompts: s.n_prompts,
            samples_per_strength: s.samples_per_strength,
            gen_tokens: s.gen_tokens,
            prompt_len: s.prompt_len,
            temperature: s.temperature,
            layer,
            n_perm: s.n_perm,
            seed: self.stage_seed("sweep", s.seed),
        }
    }
}
