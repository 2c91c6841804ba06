//! Run manifests: every output directory records exactly what produced it.
//!
//! A manifest is written before any training starts and contains the
//! resolved configuration plus the sha256 of the input scenario, so a run
//! can be reproduced bit-for-bit with the same binary and compared runs
//! can be checked for a common scenario. Manifests carry no timestamps or
//! host details; identical invocations write identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seglab_core::scenario::ScenarioSpec;
use seglab_core::train::{MethodConfig, TrainingConfig};
use seglab_core::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

pub fn tool_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRef {
    /// Path as given on the command line (informational only).
    pub path: String,
    pub sha256: String,
    pub seed: u64,
    pub spec: ScenarioSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRef {
    /// Preset name plus any ablation suffixes, e.g. `cs2k-wo-wsc`.
    pub label: String,
    pub preset: String,
    pub ablations: Vec<String>,
    pub config: MethodConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub scenario: ScenarioRef,
    pub method: MethodRef,
    pub training: TrainingConfig,
    pub seeds: Vec<u64>,
    pub svg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub spec: ScenarioSpec,
    pub seed: u64,
    /// Digest of the scenario file this manifest sits next to.
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

impl RunManifest {
    /// A resumed run must not silently change what the directory claims
    /// to contain: everything that shaped training has to match. The
    /// scenario path may differ (same file reached differently); its
    /// digest may not.
    pub fn check_resumable(&self, existing: &RunManifest) -> Result<()> {
        if existing.scenario.sha256 != self.scenario.sha256 {
            return Err(Error::config(
                "cannot resume: the scenario differs from the one this run directory was built from",
            ));
        }
        if existing.method != self.method {
            return Err(Error::config(
                "cannot resume: the method configuration differs from the original run",
            ));
        }
        if existing.training != self.training {
            return Err(Error::config(
                "cannot resume: the training configuration differs from the original run",
            ));
        }
        if existing.seeds != self.seeds {
            return Err(Error::config(
                "cannot resume: the seed list differs from the original run",
            ));
        }
        Ok(())
    }
}
