//! Staged experiment runs: pretrain, train, eval, analyze, with a manifest that
//! records hashes of every artifact and supports resuming.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, AccuracyTable};
use crate::backbone::{pretrain_backbone, Backbone, LmExample, PretrainReport};
use crate::checkpoint::{file_hash, Container};
use crate::error::{Result, TflowError};
use crate::pipeline::{self, exact_match, InferenceResult, RoleSet};
use crate::training::{self, DatasetRecord, StepMetrics, TrainState};

use super::config::{Protocol, RunConfig};
use super::io;
use super::synthetic::{self, PretrainLine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Train,
    Eval,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pretrain, Stage::Train, Stage::Eval, Stage::Analyze];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Analyze => "analyze",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Relative artifact path to SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub backbone_hash: Option<String>,
    pub completed: Vec<StageRecord>,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
}

impl Manifest {
    fn new(config: &RunConfig) -> Result<Self> {
        Ok(Self {
            schema_version: super::config::SCHEMA_VERSION,
            config_hash: config.hash()?,
            seed: config.seed,
            backbone_hash: None,
            completed: Vec::new(),
            failed_stage: None,
            error: None,
        })
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.completed.iter().find(|r| r.stage == stage)
    }

    /// All artifacts of all completed stages.
    pub fn artifacts(&self) -> BTreeMap<String, String> {
        self.completed.iter().flat_map(|r| r.artifacts.clone()).collect()
    }
}

pub const MANIFEST: &str = "manifest.json";

/// One eval row: a query under one protocol. Timings are kept out so rows are
/// reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub protocol: Protocol,
    pub source: String,
    pub query: String,
    pub target: String,
    pub answer: String,
    pub correct: bool,
    pub prefill_tokens: u64,
    pub generated_tokens: u64,
    pub total_tokens: u64,
    pub sender_generated_tokens: u64,
    pub backbone_macs: u64,
    pub lora_macs: u64,
    pub gate: Vec<f64>,
}

impl ResultRow {
    fn new(protocol: Protocol, rec: &DatasetRecord, res: &InferenceResult) -> Self {
        Self {
            protocol,
            source: rec.source.clone(),
            query: rec.query.clone(),
            target: rec.target.clone(),
            answer: res.answer.clone(),
            correct: exact_match(&res.answer, &rec.target),
            prefill_tokens: res.account.prefill(),
            generated_tokens: res.account.generated(),
            total_tokens: res.account.total(),
            sender_generated_tokens: res.account.sender_generated(),
            backbone_macs: res.counters.backbone_macs(),
            lora_macs: res.counters.lora_macs,
            gate: res.gate.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub accuracy: AccuracyTable,
    pub mean_prefill_tokens: f64,
    pub mean_generated_tokens: f64,
    pub mean_total_tokens: f64,
    pub sender_generated_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenComparison {
    pub queries: usize,
    /// Queries where weight-channel inference processed fewer tokens than text relay.
    pub tflow_fewer: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub mode: training::Mode,
    pub eval_records: usize,
    pub protocols: BTreeMap<Protocol, ProtocolSummary>,
    pub token_comparison: Option<TokenComparison>,
}

pub fn summarize(config_hash: &str, mode: training::Mode, rows: &[ResultRow]) -> Summary {
    let mut protocols = BTreeMap::new();
    let mut by_protocol: BTreeMap<Protocol, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        by_protocol.entry(r.protocol).or_default().push(r);
    }
    for (p, rs) in &by_protocol {
        let mut accuracy = AccuracyTable::default();
        for r in rs {
            accuracy.add(&r.source, r.correct);
        }
        let n = rs.len() as f64;
        let mean = |f: &dyn Fn(&ResultRow) -> u64| rs.iter().map(|r| f(r) as f64).sum::<f64>() / n;
        protocols.insert(
            *p,
            ProtocolSummary {
                accuracy,
                mean_prefill_tokens: mean(&|r| r.prefill_tokens),
                mean_generated_tokens: mean(&|r| r.generated_tokens),
                mean_total_tokens: mean(&|r| r.total_tokens),
                sender_generated_tokens: rs.iter().map(|r| r.sender_generated_tokens).sum(),
            },
        );
    }
    let token_comparison = match (by_protocol.get(&Protocol::Tflow), by_protocol.get(&Protocol::Textmas)) {
        (Some(t), Some(x)) if t.len() == x.len() && !t.is_empty() => {
            let fewer = t.iter().zip(x).filter(|(a, b)| a.total_tokens < b.total_tokens).count();
            Some(TokenComparison { queries: t.len(), tflow_fewer: fewer, fraction: fewer as f64 / t.len() as f64 })
        }
        _ => None,
    };
    let eval_records = by_protocol.values().map(Vec::len).max().unwrap_or(0);
    Summary { config_hash: config_hash.to_string(), mode, eval_records, protocols, token_comparison }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PretrainSummary {
    corpus_lines: usize,
    forms: BTreeMap<String, usize>,
    #[serde(flatten)]
    report: PretrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    /// Mean task loss over the final `min(50, steps)` steps.
    pub final_task_loss: Option<f64>,
    pub final_div_loss: Option<f64>,
    pub backbone_hash: String,
    pub layer_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivSweepPoint {
    pub lambda_div: f64,
    pub steps: usize,
    pub final_task_loss: Option<f64>,
    pub accuracy: AccuracyTable,
    pub fingerprint_within: f64,
    pub fingerprint_cross: f64,
    pub fingerprint_margins: Vec<f64>,
}

/// An output directory plus lazily loaded stage products.
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    pub roles: RoleSet,
    pub manifest: Manifest,
    backbone: Option<Backbone>,
    train: Option<Vec<DatasetRecord>>,
    eval: Option<Vec<DatasetRecord>>,
    state: Option<TrainState>,
    resume: bool,
    timings: BTreeMap<String, f64>,
}

impl Run {
    /// Opens `config.output_dir`. An existing manifest for the same config hash is kept so
    /// completed stages can be reused; `resume` additionally lets training continue from
    /// its last checkpoint.
    pub fn open(config: &RunConfig, resume: bool) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let out = config.output_dir.clone();
        std::fs::create_dir_all(&out)?;
        let fresh = Manifest::new(&config)?;
        let manifest = match io::read_json::<Manifest>(&out.join(MANIFEST)) {
            Ok(m) if m.config_hash == fresh.config_hash => m,
            Ok(_) => {
                log::warn!("existing manifest belongs to a different config; starting over");
                fresh
            }
            Err(_) => fresh,
        };
        let roles = config.role_set()?;
        let timings = if manifest.completed.is_empty() {
            BTreeMap::new()
        } else {
            io::read_json(&out.join("timings.json")).unwrap_or_default()
        };
        Ok(Self {
            config,
            out,
            roles,
            manifest,
            backbone: None,
            train: None,
            eval: None,
            state: None,
            resume,
            timings,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Completed and every recorded artifact still has its recorded hash.
    pub fn is_complete(&self, stage: Stage) -> bool {
        self.manifest.record(stage).is_some_and(|r| {
            r.artifacts.iter().all(|(rel, h)| file_hash(&self.path(rel)).ok().as_deref() == Some(h.as_str()))
        })
    }

    fn save_manifest(&self) -> Result<()> {
        io::write_json(&self.path(MANIFEST), &self.manifest)
    }

    /// Runs `stage` (after any incomplete prerequisite) and records it. With `skip_done`,
    /// an already complete stage is left alone.
    pub fn run_stage(&mut self, stage: Stage, skip_done: bool) -> Result<()> {
        for &pre in Stage::ALL.iter().filter(|&&s| s < stage) {
            if !self.is_complete(pre) {
                self.run_stage(pre, true)?;
            }
        }
        if skip_done && self.is_complete(stage) {
            log::info!("stage {} already complete", stage.name());
            return Ok(());
        }
        let t0 = Instant::now();
        log::info!("stage {} starting", stage.name());
        let result = match stage {
            Stage::Pretrain => self.stage_pretrain(),
            Stage::Train => self.stage_train(),
            Stage::Eval => self.stage_eval(),
            Stage::Analyze => self.stage_analyze(),
        };
        self.timings.insert(stage.name().to_string(), t0.elapsed().as_secs_f64());
        match result {
            Ok(paths) => {
                let mut artifacts = BTreeMap::new();
                for rel in paths {
                    artifacts.insert(rel.clone(), file_hash(&self.path(&rel))?);
                }
                // later stages depend on this one and must be redone
                self.manifest.completed.retain(|r| r.stage < stage);
                self.manifest.completed.push(StageRecord { stage, artifacts });
                self.manifest.failed_stage = None;
                self.manifest.error = None;
                self.save_manifest()?;
                io::write_json(&self.path("timings.json"), &self.timings)?;
                Ok(())
            }
            Err(e) => {
                self.manifest.completed.retain(|r| r.stage < stage);
                self.manifest.failed_stage = Some(stage);
                self.manifest.error = Some(e.to_string());
                self.save_manifest()?;
                Err(e)
            }
        }
    }

    /// Runs `stage` and its prerequisites unless already complete.
    pub fn ensure(&mut self, stage: Stage) -> Result<()> {
        if self.is_complete(stage) {
            return Ok(());
        }
        self.run_stage(stage, true)
    }

    pub fn backbone(&mut self) -> Result<&Backbone> {
        if self.backbone.is_none() {
            self.backbone = Some(io::load_backbone(&self.path("backbone.ckpt"))?);
        }
        Ok(self.backbone.as_ref().unwrap())
    }

    pub fn train_records(&mut self) -> Result<&[DatasetRecord]> {
        if self.train.is_none() {
            self.train = Some(io::read_records(&self.path("data/train.jsonl"))?);
        }
        Ok(self.train.as_deref().unwrap())
    }

    pub fn eval_records(&mut self) -> Result<&[DatasetRecord]> {
        if self.eval.is_none() {
            self.eval = Some(io::read_records(&self.path("data/eval.jsonl"))?);
        }
        Ok(self.eval.as_deref().unwrap())
    }

    pub fn state(&mut self) -> Result<&TrainState> {
        if self.state.is_none() {
            self.state = Some(TrainState::load(&self.path("state.ckpt"))?);
        }
        Ok(self.state.as_ref().unwrap())
    }

    fn pretrain_corpus(&self) -> Result<Vec<PretrainLine>> {
        let mut lines = Vec::new();
        for spec in &self.config.data.tasks {
            lines.extend(synthetic::gen_pretrain(spec, &self.roles, self.config.seed)?);
        }
        Ok(lines)
    }

    fn stage_pretrain(&mut self) -> Result<Vec<String>> {
        let cfg = &self.config;
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for spec in &cfg.data.tasks {
            let (t, e) = synthetic::gen_records(spec, cfg.seed)?;
            train.extend(t);
            eval.extend(e);
        }
        if let Some(p) = &cfg.data.train_path {
            train = io::read_records(p)?;
        }
        if let Some(p) = &cfg.data.eval_path {
            eval = io::read_records(p)?;
        }
        let held: std::collections::BTreeSet<&str> = eval.iter().map(|r| r.query.as_str()).collect();
        if let Some(r) = train.iter().find(|r| held.contains(r.query.as_str())) {
            return Err(TflowError::Dataset(format!("query `{}` is in both train and eval", r.query)));
        }
        let corpus = self.pretrain_corpus()?;
        io::write_jsonl(&self.path("data/train.jsonl"), &train)?;
        io::write_jsonl(&self.path("data/eval.jsonl"), &eval)?;
        io::write_jsonl(&self.path("data/pretrain.jsonl"), &corpus)?;
        let examples: Vec<LmExample> = corpus.iter().map(PretrainLine::example).collect();
        let mut backbone = Backbone::build(self.config.backbone.clone(), self.config.seed)?;
        let report = pretrain_backbone(&mut backbone, &examples, &self.config.pretrain)?;
        io::save_backbone(&self.path("backbone.ckpt"), &backbone)?;
        let mut forms = BTreeMap::new();
        for l in &corpus {
            let key = l.form.split(':').next().unwrap_or(&l.form).to_string();
            *forms.entry(key).or_insert(0) += 1;
        }
        io::write_json(
            &self.path("pretrain_report.json"),
            &PretrainSummary { corpus_lines: corpus.len(), forms, report },
        )?;
        self.manifest.backbone_hash = backbone.frozen_hash().map(str::to_string);
        self.backbone = Some(backbone);
        self.train = Some(train);
        self.eval = Some(eval);
        self.state = None;
        Ok(["data/train.jsonl", "data/eval.jsonl", "data/pretrain.jsonl", "backbone.ckpt", "pretrain_report.json"]
            .map(String::from)
            .to_vec())
    }

    /// Resumable within the stage: `state.ckpt` is written every `checkpoint_every` steps
    /// and `metrics.jsonl` is cut back to the checkpointed step on restart.
    fn stage_train(&mut self) -> Result<Vec<String>> {
        let target = self.config.train.steps as u64;
        let every = self.config.checkpoint_every.max(1) as u64;
        let state_path = self.path("state.ckpt");
        let metrics_path = self.path("metrics.jsonl");
        self.backbone()?;
        self.train_records()?;
        let backbone = self.backbone.as_ref().unwrap();
        let hash = backbone.frozen_hash().unwrap_or_default().to_string();
        let resumable = if self.resume { self.resumable_state(&state_path, &hash) } else { None };
        let mut state = match resumable {
            Some(s) => {
                let kept: Vec<StepMetrics> = io::read_jsonl::<StepMetrics>(&metrics_path)
                    .unwrap_or_default()
                    .into_iter()
                    .take(s.step as usize)
                    .collect();
                if kept.len() as u64 != s.step {
                    return Err(TflowError::State("metrics.jsonl is shorter than the checkpointed step".into()));
                }
                io::write_jsonl(&metrics_path, &kept)?;
                log::info!("resuming training at step {}", s.step);
                s
            }
            None => {
                io::write_jsonl::<StepMetrics>(&metrics_path, &[])?;
                TrainState::new(backbone.config(), &self.config.generator, &self.config.train)?
            }
        };
        let records = self.train.as_deref().unwrap();
        let roles = &self.roles;
        training::train(&mut state, records, backbone, roles, target, |s, m| {
            io::append_jsonl(&metrics_path, m)?;
            if m.step % every == 0 && m.step < target {
                s.save(&state_path, Some(&hash))?;
            }
            Ok(())
        })?;
        state.save(&state_path, Some(&hash))?;
        if backbone.weight_hash()? != hash {
            return Err(TflowError::Invariant("backbone weights changed during training".into()));
        }
        let all: Vec<StepMetrics> = io::read_jsonl(&metrics_path)?;
        let tail = &all[all.len().saturating_sub(50)..];
        let mean = |f: fn(&StepMetrics) -> f64| (!tail.is_empty()).then(|| tail.iter().map(f).sum::<f64>() / tail.len() as f64);
        let report = TrainReport {
            steps: state.step,
            final_task_loss: mean(|m| m.loss_task),
            final_div_loss: mean(|m| m.loss_div),
            backbone_hash: hash,
            layer_weights: analysis::layer_weights(&state.model)?,
        };
        io::write_json(&self.path("train_report.json"), &report)?;
        self.state = Some(state);
        Ok(["state.ckpt", "metrics.jsonl", "train_report.json"].map(String::from).to_vec())
    }

    fn resumable_state(&self, path: &Path, backbone_hash: &str) -> Option<TrainState> {
        let c = Container::load(path).ok()?;
        if c.metadata.get("backbone_hash").and_then(|v| v.as_str()) != Some(backbone_hash) {
            return None;
        }
        let s = TrainState::from_container(&c).ok()?;
        let same = s.train_config == self.config.train && s.generator_config == self.config.generator;
        (same && s.step <= self.config.train.steps as u64).then_some(s)
    }

    fn stage_eval(&mut self) -> Result<Vec<String>> {
        self.backbone()?;
        self.eval_records()?;
        self.state()?;
        let backbone = self.backbone.as_ref().unwrap();
        let eval = self.eval.as_deref().unwrap();
        let model = &self.state.as_ref().unwrap().model;
        let mode = self.config.train.mode;
        let decode = self.config.eval.receiver_decode();
        let sender_decode = self.config.eval.sender_decode();
        let mut rows = Vec::new();
        let mut millis: BTreeMap<String, f64> = BTreeMap::new();
        for &p in &self.config.eval.protocols {
            for rec in eval {
                let res = match p {
                    Protocol::Tflow => pipeline::tflow_infer(&rec.query, &rec.context, &self.roles, model, backbone, &decode, mode)?,
                    Protocol::Single => pipeline::single_infer(&rec.query, &self.roles.receiver, backbone, &decode)?,
                    Protocol::Textmas => pipeline::textmas_infer(
                        &rec.query,
                        &rec.context,
                        &self.roles,
                        backbone,
                        &decode,
                        &sender_decode,
                        mode,
                    )?,
                };
                *millis.entry(format!("eval.{}", p.name())).or_default() += res.millis.total;
                rows.push(ResultRow::new(p, rec, &res));
            }
        }
        let summary = summarize(&self.manifest.config_hash, mode, &rows);
        io::write_jsonl(&self.path("results.jsonl"), &rows)?;
        io::write_json(&self.path("summary.json"), &summary)?;
        for (k, v) in millis {
            self.timings.insert(k, v / 1e3);
        }
        Ok(["results.jsonl", "summary.json"].map(String::from).to_vec())
    }

    /// First `records_per_source` eval records of every source.
    fn analysis_sets(&mut self) -> Result<BTreeMap<String, Vec<DatasetRecord>>> {
        let k = self.config.analysis.records_per_source;
        let mut sets: BTreeMap<String, Vec<DatasetRecord>> = BTreeMap::new();
        for r in self.eval_records()? {
            let v = sets.entry(r.source.clone()).or_default();
            if v.len() < k {
                v.push(r.clone());
            }
        }
        Ok(sets)
    }

    pub fn analyze_fingerprints(&mut self) -> Result<Vec<String>> {
        let sets = self.analysis_sets()?;
        self.backbone()?;
        self.state()?;
        let m = analysis::fingerprint_matrix(
            &self.state.as_ref().unwrap().model,
            self.backbone.as_ref().unwrap(),
            &self.roles,
            self.config.train.mode,
            &sets,
        )?;
        io::write_text(&self.path("analysis/fingerprints.csv"), &m.to_csv()?)?;
        io::write_json(
            &self.path("analysis/fingerprints.json"),
            &serde_json::json!({
                "matrix": m,
                "diagonal_margins": m.diagonal_margins(),
                "within_mean": m.within_mean(),
                "cross_mean": m.cross_mean(),
            }),
        )?;
        Ok(["analysis/fingerprints.csv", "analysis/fingerprints.json"].map(String::from).to_vec())
    }

    pub fn analyze_hidden(&mut self) -> Result<Vec<String>> {
        let sets = self.analysis_sets()?;
        self.backbone()?;
        self.state()?;
        let rho = analysis::layer_weights(&self.state.as_ref().unwrap().model)?;
        let r = analysis::hidden_similarity_report(
            self.backbone.as_ref().unwrap(),
            &self.roles,
            Some(&rho),
            &sets,
            self.config.train.mode,
        )?;
        io::write_json(&self.path("analysis/hidden.json"), &r)?;
        io::write_text(&self.path("analysis/hidden_layers.dat"), &r.to_dat())?;
        io::write_text(&self.path("analysis/hidden_aggregated.csv"), &r.aggregated.matrix.to_csv()?)?;
        Ok(["analysis/hidden.json", "analysis/hidden_layers.dat", "analysis/hidden_aggregated.csv"]
            .map(String::from)
            .to_vec())
    }

    pub fn analyze_layers(&mut self) -> Result<Vec<String>> {
        let rho = analysis::layer_weights(&self.state()?.model)?;
        let sum: f64 = rho.iter().sum();
        io::write_json(&self.path("analysis/layers.json"), &serde_json::json!({ "rho": rho, "sum": sum }))?;
        Ok(vec!["analysis/layers.json".into()])
    }

    /// Measured cost of the first eval record of each source, plus the analytic model
    /// for doubled sender count.
    pub fn analyze_cost(&mut self) -> Result<Vec<String>> {
        let sets = self.analysis_sets()?;
        self.backbone()?;
        self.state()?;
        let model = &self.state.as_ref().unwrap().model;
        let backbone = self.backbone.as_ref().unwrap();
        let decode = self.config.eval.receiver_decode();
        let mut reports = BTreeMap::new();
        for (source, recs) in &sets {
            let r = analysis::measured_cost_report(model, backbone, &self.roles, &recs[0], self.config.train.mode, &decode)?;
            let mut doubled = r.sender_lengths.clone();
            doubled.extend(r.sender_lengths.clone());
            let scaled = analysis::cost_report(backbone.config(), &model.gen.config, &doubled, r.receiver_len, None)?;
            reports.insert(source.clone(), serde_json::json!({ "measured": r, "doubled_senders": scaled }));
        }
        io::write_json(&self.path("analysis/cost.json"), &reports)?;
        Ok(vec!["analysis/cost.json".into()])
    }

    pub fn analyze_mismatch(&mut self) -> Result<Vec<String>> {
        self.backbone()?;
        self.eval_records()?;
        self.state()?;
        let r = analysis::mismatch_ablation(
            &self.state.as_ref().unwrap().model,
            self.backbone.as_ref().unwrap(),
            &self.roles,
            self.eval.as_deref().unwrap(),
            self.config.train.mode,
            &self.config.eval.receiver_decode(),
            self.config.seed,
        )?;
        io::write_json(&self.path("analysis/mismatch.json"), &r)?;
        Ok(vec!["analysis/mismatch.json".into()])
    }

    pub fn analyze_static_lora(&mut self) -> Result<Vec<String>> {
        self.backbone()?;
        self.train_records()?;
        self.eval_records()?;
        let (model, report) = analysis::static_lora_baseline(
            self.backbone.as_ref().unwrap(),
            &self.roles,
            self.train.as_deref().unwrap(),
            self.eval.as_deref().unwrap(),
            &self.config.generator,
            &self.config.train,
            &self.config.eval.receiver_decode(),
        )?;
        let fp = analysis::static_fingerprint(&model)?;
        io::write_json(
            &self.path("analysis/static_lora.json"),
            &serde_json::json!({ "report": report, "fingerprint_norm": fp.norm() }),
        )?;
        Ok(vec!["analysis/static_lora.json".into()])
    }

    /// Retrains the generator for each configured diversity weight.
    pub fn analyze_div_sweep(&mut self) -> Result<Vec<String>> {
        let sets = self.analysis_sets()?;
        self.backbone()?;
        self.train_records()?;
        self.eval_records()?;
        let backbone = self.backbone.as_ref().unwrap();
        let steps = match self.config.analysis.div_sweep_steps {
            0 => self.config.train.steps,
            n => n,
        };
        let decode = self.config.eval.receiver_decode();
        let mode = self.config.train.mode;
        let mut points = Vec::new();
        for &lambda in &self.config.analysis.div_sweep {
            let tcfg = training::TrainConfig { lambda_div: lambda, steps, ..self.config.train.clone() };
            let mut state = TrainState::new(backbone.config(), &self.config.generator, &tcfg)?;
            let trace =
                training::train(&mut state, self.train.as_deref().unwrap(), backbone, &self.roles, steps as u64, |_, _| Ok(()))?;
            let tail = &trace[trace.len().saturating_sub(50)..];
            let final_task_loss =
                (!tail.is_empty()).then(|| tail.iter().map(|m| m.loss_task).sum::<f64>() / tail.len() as f64);
            let mut accuracy = AccuracyTable::default();
            for rec in self.eval.as_deref().unwrap() {
                let res = pipeline::tflow_infer(&rec.query, &rec.context, &self.roles, &state.model, backbone, &decode, mode)?;
                accuracy.add(&rec.source, exact_match(&res.answer, &rec.target));
            }
            let m = analysis::fingerprint_matrix(&state.model, backbone, &self.roles, mode, &sets)?;
            points.push(DivSweepPoint {
                lambda_div: lambda,
                steps,
                final_task_loss,
                accuracy,
                fingerprint_within: m.within_mean(),
                fingerprint_cross: m.cross_mean(),
                fingerprint_margins: m.diagonal_margins(),
            });
        }
        io::write_json(&self.path("analysis/div_sweep.json"), &points)?;
        Ok(vec!["analysis/div_sweep.json".into()])
    }

    fn stage_analyze(&mut self) -> Result<Vec<String>> {
        type Step = fn(&mut Run) -> Result<Vec<String>>;
        let mut steps: Vec<(&str, Step)> = vec![
            ("fingerprints", Run::analyze_fingerprints),
            ("hidden", Run::analyze_hidden),
            ("layers", Run::analyze_layers),
            ("cost", Run::analyze_cost),
        ];
        if self.config.analysis.mismatch {
            steps.push(("mismatch", Run::analyze_mismatch));
        }
        if self.config.analysis.static_lora {
            steps.push(("static_lora", Run::analyze_static_lora));
        }
        let mut out = Vec::new();
        for (name, step) in steps {
            let t0 = Instant::now();
            out.extend(step(self)?);
            self.timings.insert(format!("analyze.{name}"), t0.elapsed().as_secs_f64());
        }
        Ok(out)
    }

    /// One query under one protocol with the run's trained state.
    pub fn infer(&mut self, query: &str, context: &str, protocol: Protocol) -> Result<InferenceResult> {
        self.backbone()?;
        let decode = self.config.eval.receiver_decode();
        let mode = self.config.train.mode;
        match protocol {
            Protocol::Tflow => {
                self.state()?;
                let backbone = self.backbone.as_ref().unwrap();
                pipeline::tflow_infer(query, context, &self.roles, &self.state.as_ref().unwrap().model, backbone, &decode, mode)
            }
            Protocol::Single => pipeline::single_infer(query, &self.roles.receiver, self.backbone.as_ref().unwrap(), &decode),
            Protocol::Textmas => pipeline::textmas_infer(
                query,
                context,
                &self.roles,
                self.backbone.as_ref().unwrap(),
                &decode,
                &self.config.eval.sender_decode(),
                mode,
            ),
        }
    }
}

/// Runs every stage in order. With `resume`, stages already recorded as complete (with
/// unchanged artifacts) are skipped.
pub fn run_experiment(config: &RunConfig, resume: bool) -> Result<Manifest> {
    let mut run = Run::open(config, resume)?;
    for stage in Stage::ALL {
        run.run_stage(stage, resume)?;
    }
    Ok(run.manifest)
}
