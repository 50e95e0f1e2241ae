//! JSON configuration file. Paths inside it are resolved against the file's
//! directory; command-line flags take precedence over every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trialign_core::encoder::EncoderConfig;
use trialign_core::evalkit::{ProbeConfig, PromptAveraging};
use trialign_core::retrieval::ServiceError;
use trialign_core::synthetic::SyntheticConfig;
use trialign_core::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub class_vectors: Option<PathBuf>,
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.manifest,
            &mut self.test_manifest,
            &mut self.cache,
            &mut self.checkpoint,
            &mut self.index,
            &mut self.out,
            &mut self.templates,
            &mut self.class_vectors,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Benchmark name in the report; defaults to the manifest file stem.
    pub benchmark: Option<String>,
    /// Class list; defaults to the sorted distinct labels of the manifest.
    pub labels: Option<Vec<String>>,
    pub prompt_averaging: PromptAveraging,
    /// Shot counts for `probe`; defaults to `probe.shots` alone.
    pub probe_shots: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSection {
    /// Overrides per-record `num_points` of mesh references.
    pub num_points: Option<usize>,
    /// Write point clouds as sidecar files in this directory instead of inline.
    pub sidecar_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub world: SyntheticConfig,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            world: SyntheticConfig::default(),
            train_per_class: 60,
            test_per_class: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Required by `train`; overrides `train.seed`.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub probe: ProbeConfig,
    pub prepare: PrepareSection,
    pub synth: SynthSection,
    pub serve: ServeSection,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::new("io", format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: CliConfig = serde_json::from_str(&text)
            .map_err(|e| ServiceError::new("parse", format!("config {}: {e}", path.display())))?;
        cfg.paths.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }
}
