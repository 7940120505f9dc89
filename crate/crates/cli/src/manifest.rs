// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-stage manifests: config hash, tool version, timings and file digests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{digest_file, read_json, write_json};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the output root.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Hash of the config sections this stage reads; decides whether a rerun is needed.
    pub stage_hash: String,
    pub master_seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Wall-clock seconds per step; the only non-reproducible field.
    pub timings_s: BTreeMap<String, f64>,
    /// Stage-specific facts (chosen axes, convergence, match rates, ...).
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn path(root: &Path, stage: &str) -> std::path::PathBuf {
        root.join(stage).join(MANIFEST_NAME)
    }

    pub fn load(root: &Path, stage: &str) -> Result<Self> {
        read_json(&Self::path(root, stage))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_json(&Self::path(root, &self.stage), self)
    }

    pub fn output(&self, rel: &str) -> Option<&FileDigest> {
        self.outputs.iter().find(|f| f.path == rel)
    }

    /// Outputs whose relative path starts with `prefix`, in manifest order.
    pub fn outputs_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.outputs.iter().filter(|f| f.path.starts_with(prefix)).map(|f| f.path.clone()).collect()
    }

    /// True when the manifest was written with the same stage config and every
    /// recorded input and output still has its recorded digest.
    pub fn is_current(&self, root: &Path, stage_hash: &str, inputs: &[String]) -> bool {
        if self.stage_hash != stage_hash {
            return false;
        }
        let recorded: Vec<&str> = self.inputs.iter().map(|f| f.path.as_str()).collect();
        if recorded != inputs.iter().map(String::as_str).collect::<Vec<_>>() {
            return false;
        }
        self.inputs.iter().chain(&self.outputs).all(|f| digest_file(&root.join(&f.path)).is_ok_and(|d| d == f.sha256))
    }
}

pub fn digests(root: &Path, rel: &[String]) -> Result<Vec<FileDigest>> {
    rel.iter()
        .map(|p| Ok(FileDigest { path: p.clone(), sha256: digest_file(&root.join(p))? }))
        .collect()
}
