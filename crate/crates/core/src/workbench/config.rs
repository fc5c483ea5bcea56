//! Run configuration: one JSON document describing a complete experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, DecodeParams, PretrainConfig};
use crate::error::{Result, TflowError};
use crate::generator::GeneratorConfig;
use crate::pipeline::{RolePrompt, RoleSet};
use crate::training::TrainConfig;

use super::synthetic::{SyntheticTaskSpec, TaskKind};

pub const SCHEMA_VERSION: u32 = 1;

/// Where train and eval records come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic task families; also the pretraining corpus.
    pub tasks: Vec<SyntheticTaskSpec>,
    /// JSONL files that replace the generated train/eval records when set.
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tasks: TaskKind::ALL.iter().map(|&k| SyntheticTaskSpec::new(k)).collect(),
            train_path: None,
            eval_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Receiver decoding budget.
    pub max_new: usize,
    /// Sender message budget for the text-relay baseline.
    pub textmas_max_new: usize,
    pub protocols: Vec<Protocol>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_new: 16, textmas_max_new: 32, protocols: Protocol::ALL.to_vec() }
    }
}

impl EvalConfig {
    pub fn receiver_decode(&self) -> DecodeParams {
        DecodeParams::greedy(self.max_new)
    }

    pub fn sender_decode(&self) -> DecodeParams {
        DecodeParams::greedy(self.textmas_max_new)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tflow,
    Single,
    Textmas,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Tflow, Protocol::Single, Protocol::Textmas];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Tflow => "tflow",
            Protocol::Single => "single",
            Protocol::Textmas => "textmas",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = TflowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tflow" => Ok(Protocol::Tflow),
            "single" => Ok(Protocol::Single),
            "textmas" => Ok(Protocol::Textmas),
            other => Err(TflowError::Config(format!("unknown protocol `{other}` (tflow | single | textmas)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Records per source used for fingerprint and hidden-state similarity.
    pub records_per_source: usize,
    pub mismatch: bool,
    pub static_lora: bool,
    /// Diversity weights trained by the `div-sweep` ablation.
    pub div_sweep: Vec<f64>,
    /// Generator steps per sweep point; 0 means the training step count.
    pub div_sweep_steps: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { records_per_source: 20, mismatch: true, static_lora: true, div_sweep: vec![0.0, 0.01, 0.1, 1.0], div_sweep_steps: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Overrides every component seed.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "RoleSet::default_roles")]
    pub roles: Vec<RolePrompt>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Training checkpoint interval in generator steps.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_checkpoint_every() -> usize {
    500
}

fn default_seed() -> u64 {
    7
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: default_seed(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            roles: RoleSet::default_roles(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
            output_dir: default_output(),
            checkpoint_every: default_checkpoint_every(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| TflowError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TflowError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            TflowError::Config(msg) => TflowError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(TflowError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.backbone.validate()?;
        self.generator.validate()?;
        self.train.validate()?;
        RoleSet::new(&self.roles)?.require_senders()?;
        if self.data.tasks.is_empty() && (self.data.train_path.is_none() || self.data.eval_path.is_none()) {
            return Err(TflowError::Config("no synthetic tasks and no dataset paths".into()));
        }
        let mut kinds: Vec<TaskKind> = self.data.tasks.iter().map(|t| t.kind).collect();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.data.tasks.len() {
            return Err(TflowError::Config("each task kind may appear once".into()));
        }
        if self.eval.protocols.is_empty() {
            return Err(TflowError::Config("eval.protocols is empty".into()));
        }
        Ok(())
    }

    /// Copy with the global seed pushed into every component.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = self.seed;
        c.train.seed = self.seed;
        c
    }

    pub fn role_set(&self) -> Result<RoleSet> {
        RoleSet::new(&self.roles)
    }

    /// Canonical JSON (sorted keys, no whitespace).
    pub fn canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&value)?)
    }

    /// Content hash. The output directory is a location, not part of the experiment, and is left out.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.canonical_json()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_document_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn misspelled_key_rejected() {
        let err = RunConfig::from_json(r#"{"schema_version": 1, "trian": {}}"#).unwrap_err();
        assert!(err.is_config());
        let err = RunConfig::from_json(r#"{"schema_version": 1, "train": {"stpes": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("stpes"));
    }

    #[test]
    fn wrong_schema_rejected() {
        assert!(RunConfig::from_json(r#"{"schema_version": 9}"#).is_err());
        assert!(RunConfig::from_json(r#"{}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.train.steps += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        let c = RunConfig { output_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn global_seed_propagates() {
        let cfg = RunConfig { seed: 99, ..Default::default() }.resolved();
        assert_eq!(cfg.pretrain.seed, 99);
        assert_eq!(cfg.train.seed, 99);
    }
}
