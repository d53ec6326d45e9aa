//! Declarative run configuration: one TOML file covering generation,
//! training, tracking and evaluation, with command-line overrides. Every
//! command writes its resolved configuration next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::synthdata::BenchmarkOptions;
use crate::tracker::{NetConfig, TrackerConfig};
use crate::training::TrainingConfig;

/// Environment variable naming the workspace root.
pub const WORKSPACE_ENV: &str = "CMOT_WORKSPACE";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Dual-modality fixtures to convert alongside the toy benchmark.
    pub n_dual: usize,
    pub options: BenchmarkOptions,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 40,
            n_test: 20,
            n_dual: 8,
            options: BenchmarkOptions::default(),
        }
    }
}

/// The full declarative run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for per-sequence parallelism in track/eval.
    pub jobs: usize,
    pub synth: SynthConfig,
    pub net: NetConfig,
    pub tracker: TrackerConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            jobs: 1,
            synth: SynthConfig::default(),
            net: NetConfig::toy(true),
            tracker: TrackerConfig::toy(),
            training: TrainingConfig::toy(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.eval.validate()?;
        self.net.backbone.validate()?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Resolve the workspace root: explicit flag, then the environment
/// variable, then `./cmot-workspace`.
pub fn resolve_workspace(flag: Option<PathBuf>) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    if let Ok(p) = std::env::var(WORKSPACE_ENV) {
        if !p.is_empty() {
            return PathBuf::from(p);
        }
    }
    PathBuf::from("cmot-workspace")
}
