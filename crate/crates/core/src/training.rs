//! End-to-end optimization of the trainable set: layer scalars, conditioning
//! projection, generator and gate. The backbone is never touched.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{run_forward, Backbone, BackboneConfig, ExecContext, ForwardArgs, HiddenStack};
use crate::checkpoint::Container;
use crate::conditioning;
use crate::error::{Result, TflowError};
use crate::fusion::{self, apply_scoped, FusionGate, TransientPatch};
use crate::generator::{FactorBatch, Generator, GeneratorConfig, GeneratorWeights, Layout};
use crate::nn;
use crate::optim::{collect_grads, AdamW, AdamWConfig, ParamSet};
use crate::pipeline::{self, RoleSet};
use crate::tokenizer::TokenSeq;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub query: String,
    #[serde(default)]
    pub context: String,
    pub target: String,
    pub source: String,
}

/// Who sees the record context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Senders read the context, the receiver never does.
    #[default]
    Isolation,
    /// No agent reads the context; every agent sees only the query.
    Faithful,
}

impl std::str::FromStr for Mode {
    type Err = TflowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isolation" => Ok(Mode::Isolation),
            "faithful" => Ok(Mode::Faithful),
            other => Err(TflowError::Config(format!("unknown mode `{other}` (isolation | faithful)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub lambda_div: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Layer-mixing temperature.
    pub tau: f64,
    pub log_every: usize,
    /// Linear warmup length; the rate then follows a cosine down to `min_lr_ratio * lr` at `steps`.
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig { lr: 3e-4, ..AdamWConfig::default() },
            batch_size: 8,
            steps: 2000,
            lambda_div: 0.1,
            mode: Mode::Isolation,
            seed: 7,
            tau: 1.0,
            log_every: 50,
            warmup_steps: 50,
            min_lr_ratio: 0.1,
        }
    }
}

impl TrainConfig {
    /// Learning rate for the update that produces step `step + 1`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let base = self.optimizer.lr;
        let s = step as f64;
        let warm = self.warmup_steps as f64;
        if s < warm {
            return base * (s + 1.0) / warm;
        }
        let span = (self.steps as f64 - warm).max(1.0);
        let t = ((s - warm) / span).min(1.0);
        let floor = base * self.min_lr_ratio;
        floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(TflowError::Config("min_lr_ratio must be in [0, 1]".into()));
        }
        if !(self.lambda_div >= 0.0) {
            return Err(TflowError::Config("lambda_div must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(TflowError::Config("tau must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TflowError::Config("batch_size must be >= 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(TflowError::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

/// Mean next-token NLL over the masked completion positions of one sequence.
pub fn task_loss(logits: &Tensor, tokens: &[u32], mask: &[bool]) -> Result<Tensor> {
    let t = tokens.len();
    if logits.dims() != [t, logits.dim(1)?] || mask.len() != t {
        return Err(TflowError::Shape(format!("logits {:?} for {t} tokens", logits.dims())));
    }
    if !mask.iter().skip(1).any(|&m| m) {
        return Err(TflowError::Input("answer mask selects no target token".into()));
    }
    let ids = Tensor::from_vec(tokens.to_vec(), (1, t), logits.device())?;
    let m: Vec<f32> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let m = Tensor::from_vec(m, (1, t), logits.device())?;
    nn::masked_next_token_nll(&logits.unsqueeze(0)?, &ids, &m)
}

/// `cos²(v, cached)`, or zero when there is no cache entry or either norm vanishes.
pub fn diversity_loss(v: &Tensor, cached: Option<&Tensor>) -> Result<Tensor> {
    let zero = Tensor::zeros((), v.dtype(), v.device())?;
    let Some(c) = cached else { return Ok(zero) };
    let c = c.detach().to_dtype(v.dtype())?;
    if c.dims() != v.dims() {
        return Err(TflowError::Shape(format!("cache {:?} vs update {:?}", c.dims(), v.dims())));
    }
    let vv = v.sqr()?.sum_all()?;
    let cc = c.sqr()?.sum_all()?;
    if nn::scalar_f64(&vv)? == 0.0 || nn::scalar_f64(&cc)? == 0.0 {
        log::warn!("diversity loss skipped: degenerate update norm");
        return Ok(zero);
    }
    let dot = (v * &c)?.sum_all()?;
    let cos2 = (dot.sqr()? / (vv * cc)?)?;
    Ok(cos2.clamp(0.0, 1.0)?)
}

/// Hidden stacks of a sender batch, `[G, L_total + 1, T_max, d]`.
#[derive(Debug, Clone)]
pub struct SenderBatch {
    pub hidden: Tensor,
    pub lengths: Vec<usize>,
}

impl SenderBatch {
    pub fn ragged(&self) -> bool {
        self.lengths.iter().any(|&l| l != self.lengths[0])
    }

    pub fn from_stacks(stacks: &[HiddenStack]) -> Result<Self> {
        let lengths = stacks.iter().map(|h| h.seq_len()).collect::<Result<Vec<_>>>()?;
        let t_max = *lengths.iter().max().ok_or_else(|| TflowError::Input("no senders".into()))?;
        let padded = stacks
            .iter()
            .zip(&lengths)
            .map(|(h, &t)| {
                let s = h.stacked()?;
                Ok(if t == t_max { s } else { s.pad_with_zeros(1, 0, t_max - t)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { hidden: Tensor::stack(&padded, 0)?, lengths })
    }
}

/// One batched frozen forward over every sender sequence.
pub fn capture_senders(backbone: &Backbone, seqs: &[TokenSeq]) -> Result<SenderBatch> {
    backbone.require_frozen()?;
    if seqs.is_empty() {
        return Err(TflowError::Input("no sender sequences".into()));
    }
    for s in seqs {
        backbone.check_tokens(s)?;
    }
    let batch: Vec<crate::backbone::LmExample> =
        seqs.iter().map(|s| crate::backbone::LmExample { tokens: s.clone(), mask: vec![false; s.len()] }).collect();
    let refs: Vec<&crate::backbone::LmExample> = batch.iter().collect();
    let (ids, lengths, _) = crate::backbone::pad_batch(&refs)?;
    let ragged = lengths.iter().any(|&l| l != lengths[0]);
    let out = run_forward(
        backbone.config(),
        backbone.weights(),
        ForwardArgs {
            ids: &ids,
            lengths: ragged.then_some(lengths.as_slice()),
            cache: None,
            patch: None,
            counters: None,
            capture: true,
        },
    )?;
    Ok(SenderBatch { hidden: Tensor::stack(&out.hidden, 1)?, lengths })
}

/// Conditioning, generator and gate outputs for a sender batch.
#[derive(Debug, Clone)]
pub struct SenderOutputs {
    pub factors: FactorBatch,
    /// `[G, T_max, d_model]`
    pub raw: Tensor,
    /// `[G, d_model]`
    pub pooled: Tensor,
    pub lengths: Vec<usize>,
}

/// The trainable model: layer scalars, projection, generator and gate.
#[derive(Debug, Clone)]
pub struct TflowModel {
    pub gen: Generator,
    pub lambda: Tensor,
    pub tau: f64,
    pub proj: Tensor,
    pub gate: FusionGate,
}

impl TflowModel {
    /// Seeded initial tensors keyed by checkpoint name.
    pub fn init_tensors(bcfg: &BackboneConfig, gcfg: &GeneratorConfig, seed: u64) -> Result<BTreeMap<String, Tensor>> {
        let layout = Layout::new(bcfg, gcfg)?;
        let mut rng = nn::seeded_rng(seed);
        let mut out = BTreeMap::new();
        out.insert("cond.lambda".to_string(), nn::zeros(&[bcfg.n_layers + 1])?);
        out.insert(
            "cond.proj".to_string(),
            nn::normal_tensor(&mut rng, &[gcfg.d_pg, bcfg.d_model], crate::generator::fan_in_std(bcfg.d_model))?,
        );
        let gw = GeneratorWeights::init(&layout, gcfg, &mut rng)?;
        for (name, t) in gw.named() {
            out.insert(format!("gen.{name}"), t.clone());
        }
        out.insert("gate.w".to_string(), nn::normal_tensor(&mut rng, &[bcfg.d_model], gcfg.init_std)?);
        out.insert("gate.b".to_string(), nn::zeros(&[1])?);
        Ok(out)
    }

    pub fn from_tensors(
        bcfg: &BackboneConfig,
        gcfg: &GeneratorConfig,
        tau: f64,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let layout = Layout::new(bcfg, gcfg)?;
        let get = |name: &str| -> Result<Tensor> {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| TflowError::Format { tensor: name.into(), reason: "missing".into() })
        };
        let mut rng = nn::seeded_rng(0);
        let mut gw = GeneratorWeights::init(&layout, gcfg, &mut rng)?;
        for (name, t) in gw.named_mut() {
            let v = get(&format!("gen.{name}"))?;
            if v.dims() != t.dims() {
                return Err(TflowError::Format {
                    tensor: format!("gen.{name}"),
                    reason: format!("shape {:?}, expected {:?}", v.dims(), t.dims()),
                });
            }
            *t = v;
        }
        let gen = Generator::new(gcfg.clone(), layout, gw)?;
        let lambda = get("cond.lambda")?;
        let proj = get("cond.proj")?;
        if lambda.dims() != [bcfg.n_layers + 1] || proj.dims() != [gcfg.d_pg, bcfg.d_model] {
            return Err(TflowError::Format { tensor: "cond".into(), reason: "conditioning shapes disagree with config".into() });
        }
        conditioning::LayerAggregator::new(lambda.clone(), tau)?;
        Ok(Self { gen, lambda, tau, proj, gate: FusionGate { w: get("gate.w")?, b: get("gate.b")? } })
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("cond.lambda".to_string(), self.lambda.clone()), ("cond.proj".to_string(), self.proj.clone())];
        for (name, t) in self.gen.weights.named() {
            out.push((format!("gen.{name}"), t.clone()));
        }
        out.push(("gate.w".to_string(), self.gate.w.clone()));
        out.push(("gate.b".to_string(), self.gate.b.clone()));
        out
    }

    pub fn layout(&self) -> &Layout {
        &self.gen.layout
    }

    pub fn layer_weights(&self) -> Result<Tensor> {
        conditioning::layer_weights(&self.lambda, self.tau)
    }

    pub fn sender_outputs(&self, senders: &SenderBatch) -> Result<SenderOutputs> {
        let rho = self.layer_weights()?;
        let raw = conditioning::aggregate_batched(&senders.hidden, &rho)?;
        let ctilde = conditioning::project(&raw, &self.proj)?;
        let lengths = senders.ragged().then_some(senders.lengths.as_slice());
        let factors = self.gen.forward_padded(&ctilde, lengths)?;
        let pooled = fusion::masked_mean(&raw, &senders.lengths)?;
        Ok(SenderOutputs { factors, raw, pooled, lengths: senders.lengths.clone() })
    }

    /// Gate-fused patch over instances `start..start + n`.
    pub fn patch(&self, out: &SenderOutputs, start: usize, n: usize) -> Result<TransientPatch> {
        let (_, gamma) = self.gate.scores_pooled(&out.pooled.narrow(0, start, n)?)?;
        let cfg = &self.gen.config;
        fusion::fuse_batch(&out.factors.narrow(start, n)?, &gamma, cfg.alpha, cfg.rank)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_task: f64,
    pub loss_div: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Record indices drawn with replacement for `step`; a pure function of its arguments.
pub fn batch_indices(seed: u64, batch_size: usize, step: u64, n_records: usize) -> Vec<usize> {
    let mut rng = nn::seeded_rng(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_add(1));
    (0..batch_size).map(|_| rng.random_range(0..n_records)).collect()
}

/// Trainable parameters, optimizer moments, step counter and diversity cache.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub backbone_config: BackboneConfig,
    pub generator_config: GeneratorConfig,
    pub train_config: TrainConfig,
    pub params: ParamSet,
    pub model: TflowModel,
    pub opt: AdamW,
    pub step: u64,
    pub cache: BTreeMap<String, Tensor>,
}

impl TrainState {
    pub fn new(bcfg: &BackboneConfig, gcfg: &GeneratorConfig, tcfg: &TrainConfig) -> Result<Self> {
        tcfg.validate()?;
        let tensors = TflowModel::init_tensors(bcfg, gcfg, tcfg.seed)?;
        Self::from_parts(bcfg, gcfg, tcfg, tensors, AdamW::new(tcfg.optimizer.clone()), 0, BTreeMap::new())
    }

    fn from_parts(
        bcfg: &BackboneConfig,
        gcfg: &GeneratorConfig,
        tcfg: &TrainConfig,
        tensors: BTreeMap<String, Tensor>,
        opt: AdamW,
        step: u64,
        cache: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut tracked = BTreeMap::new();
        for (name, t) in tensors {
            tracked.insert(name.clone(), params.register(name, t)?);
        }
        let model = TflowModel::from_tensors(bcfg, gcfg, tcfg.tau, &tracked)?;
        Ok(Self {
            backbone_config: bcfg.clone(),
            generator_config: gcfg.clone(),
            train_config: tcfg.clone(),
            params,
            model,
            opt,
            step,
            cache,
        })
    }

    pub fn dtype(&self) -> DType {
        self.model.lambda.dtype()
    }

    /// Independent copy computing in `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let conv = |m: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            m.iter().map(|(k, v)| Ok((k.clone(), v.to_dtype(dtype)?.detach()))).collect()
        };
        let mut opt = self.opt.clone();
        opt.m = conv(&opt.m)?;
        opt.v = conv(&opt.v)?;
        Self::from_parts(
            &self.backbone_config,
            &self.generator_config,
            &self.train_config,
            conv(&self.params.snapshot()?)?,
            opt,
            self.step,
            conv(&self.cache)?,
        )
    }

    /// Replaces one parameter's value.
    pub fn set_param(&self, name: &str, value: &Tensor) -> Result<()> {
        self.params.set(name, value)
    }

    /// Indices of the records used at `step`; depends only on (seed, step).
    pub fn batch_indices(&self, step: u64, n_records: usize) -> Vec<usize> {
        batch_indices(self.train_config.seed, self.train_config.batch_size, step, n_records)
    }

    pub fn save(&self, path: &Path, backbone_hash: Option<&str>) -> Result<()> {
        self.to_container(backbone_hash)?.save(path)
    }

    pub fn to_container(&self, backbone_hash: Option<&str>) -> Result<Container> {
        let meta = serde_json::json!({
            "schema": CHECKPOINT_SCHEMA,
            "step": self.step,
            "opt_step": self.opt.step,
            "backbone": self.backbone_config,
            "generator": self.generator_config,
            "train": self.train_config,
            "backbone_hash": backbone_hash,
        });
        let mut c = Container::new(meta);
        for (name, t) in self.params.snapshot()? {
            c.insert(name, &t)?;
        }
        c.insert("cond.tau", &Tensor::new(&[self.model.tau as f32], self.model.lambda.device())?)?;
        for (name, t) in &self.opt.m {
            c.insert(format!("opt.m.{name}"), t)?;
        }
        for (name, t) in &self.opt.v {
            c.insert(format!("opt.v.{name}"), t)?;
        }
        for (src, t) in &self.cache {
            c.insert(format!("div.{src}"), t)?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.metadata;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| TflowError::Format { tensor: "<header>".into(), reason: format!("metadata lacks `{k}`") });
        let schema: u32 = serde_json::from_value(field("schema")?)?;
        if schema != CHECKPOINT_SCHEMA {
            return Err(TflowError::Format { tensor: "<header>".into(), reason: format!("unsupported schema {schema}") });
        }
        let bcfg: BackboneConfig = serde_json::from_value(field("backbone")?)?;
        let gcfg: GeneratorConfig = serde_json::from_value(field("generator")?)?;
        let tcfg: TrainConfig = serde_json::from_value(field("train")?)?;
        let step: u64 = serde_json::from_value(field("step")?)?;
        let opt_step: u64 = serde_json::from_value(field("opt_step")?)?;
        let mut theta = BTreeMap::new();
        let mut opt = AdamW::new(tcfg.optimizer.clone());
        opt.step = opt_step;
        let mut cache = BTreeMap::new();
        for (name, t) in &c.tensors {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                opt.m.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                opt.v.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix("div.") {
                cache.insert(rest.to_string(), t.clone());
            } else if name != "cond.tau" {
                theta.insert(name.clone(), t.clone());
            }
        }
        let tau = nn::scalar_f64(c.get("cond.tau")?)?;
        if (tau - tcfg.tau).abs() > 1e-6 {
            return Err(TflowError::Format { tensor: "cond.tau".into(), reason: "disagrees with the stored config".into() });
        }
        Self::from_parts(&bcfg, &gcfg, &tcfg, theta, opt, step, cache)
    }
}

/// Loss pieces of one batch, before the optimizer update.
pub struct Objective {
    pub loss: Tensor,
    pub loss_task: f64,
    pub loss_div: f64,
    /// Detached fused update per source, the last record of each source winning.
    pub updates: BTreeMap<String, Tensor>,
}

/// Mean over the batch of `L_task + λ_div·L_div`; every patch is removed before return.
pub fn objective(
    state: &TrainState,
    batch: &[&DatasetRecord],
    backbone: &Backbone,
    roles: &RoleSet,
) -> Result<Objective> {
    objective_impl(state, batch, backbone, roles, false)
}

/// `objective` with the loss reductions accumulated in f64 (forward passes keep the state dtype).
pub fn objective_f64_reduced(
    state: &TrainState,
    batch: &[&DatasetRecord],
    backbone: &Backbone,
    roles: &RoleSet,
) -> Result<Objective> {
    objective_impl(state, batch, backbone, roles, true)
}

fn objective_impl(
    state: &TrainState,
    batch: &[&DatasetRecord],
    backbone: &Backbone,
    roles: &RoleSet,
    wide: bool,
) -> Result<Objective> {
    let widen = |t: Tensor| -> Result<Tensor> { Ok(if wide { t.to_dtype(DType::F64)? } else { t }) };
    backbone.require_frozen()?;
    if batch.is_empty() {
        return Err(TflowError::Input("empty batch".into()));
    }
    if backbone.dtype() != state.dtype() {
        return Err(TflowError::State("backbone and trainable state use different dtypes".into()));
    }
    roles.require_senders()?;
    let mode = state.train_config.mode;
    let n_s = roles.senders.len();
    let mut seqs = Vec::with_capacity(batch.len() * n_s);
    for rec in batch {
        for role in &roles.senders {
            seqs.push(pipeline::sender_tokens(role, rec, mode));
        }
    }
    let senders = capture_senders(backbone, &seqs)?;
    let out = state.model.sender_outputs(&senders)?;
    let ctx = ExecContext::new(backbone)?;
    let lambda_div = state.train_config.lambda_div;
    let mut total: Option<Tensor> = None;
    let (mut sum_task, mut sum_div) = (0.0, 0.0);
    let mut updates = BTreeMap::new();
    for (k, rec) in batch.iter().enumerate() {
        let (tokens, mask) = pipeline::receiver_teacher_forced(&roles.receiver, rec)?;
        let mut patch = state.model.patch(&out, k * n_s, n_s)?;
        let v = patch.flatten_dense()?;
        let ldiv = diversity_loss(&widen(v.clone())?, state.cache.get(&rec.source))?;
        let logits = apply_scoped(&ctx, &mut patch, |c| c.logits(&tokens))?;
        let ltask = task_loss(&widen(logits)?, &tokens, &mask)?;
        let (lt, ld) = (nn::scalar_f64(&ltask)?, nn::scalar_f64(&ldiv)?);
        if !lt.is_finite() || !ld.is_finite() {
            return Err(TflowError::Training(format!(
                "non-finite loss at step {} (record `{}`, task {lt}, diversity {ld})",
                state.step, rec.query
            )));
        }
        sum_task += lt;
        sum_div += ld;
        let term = if lambda_div > 0.0 { (ltask + (ldiv * lambda_div)?)? } else { ltask };
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
        updates.insert(rec.source.clone(), v.detach());
    }
    let b = batch.len() as f64;
    Ok(Objective { loss: (total.unwrap() / b)?, loss_task: sum_task / b, loss_div: sum_div / b, updates })
}

/// One optimizer update on the batch, then the cache refresh.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&DatasetRecord],
    backbone: &Backbone,
    roles: &RoleSet,
) -> Result<StepMetrics> {
    let obj = objective(state, batch, backbone, roles)?;
    let grads = collect_grads(&state.params, &obj.loss.backward()?)?;
    let lr = state.train_config.lr_at(state.step);
    state.opt.config.lr = lr;
    let grad_norm = state.opt.step(&state.params, &grads)?;
    for (src, v) in obj.updates {
        state.cache.insert(src, v);
    }
    state.step += 1;
    Ok(StepMetrics { step: state.step, loss_task: obj.loss_task, loss_div: obj.loss_div, grad_norm, lr })
}

/// Trains until `state.step == target_step`, sampling batches from `records`.
pub fn train(
    state: &mut TrainState,
    records: &[DatasetRecord],
    backbone: &Backbone,
    roles: &RoleSet,
    target_step: u64,
    mut on_step: impl FnMut(&TrainState, &StepMetrics) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    if records.is_empty() {
        return Err(TflowError::Input("no training records".into()));
    }
    if let Some(bad) = records.iter().find(|r| r.target.is_empty()) {
        return Err(TflowError::Dataset(format!("training record `{}` has an empty target", bad.query)));
    }
    let mut trace = Vec::new();
    while state.step < target_step {
        let idx = state.batch_indices(state.step, records.len());
        let batch: Vec<&DatasetRecord> = idx.iter().map(|&i| &records[i]).collect();
        let m = train_step(state, &batch, backbone, roles)?;
        let every = state.train_config.log_every.max(1) as u64;
        if m.step % every == 0 || m.step == 1 {
            log::info!("step {} task {:.4} div {:.4} |g| {:.3}", m.step, m.loss_task, m.loss_div, m.grad_norm);
        }
        on_step(state, &m)?;
        trace.push(m);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorGradCheck {
    pub name: String,
    pub coords: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_error: f64,
    /// The analytic and numeric gradients differ by less than the finite-difference noise floor,
    /// so the relative error is not resolvable at this precision.
    pub within_noise: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub noise_floor: f64,
    pub loss: f64,
    pub tensors: Vec<TensorGradCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().filter(|t| !t.within_noise).map(|t| t.rel_error).fold(0.0, f64::max)
    }
}

/// Central finite differences of the full objective against reverse-mode gradients
/// for up to `coords_per_tensor` sampled entries of every trainable tensor.
///
/// Error per tensor is norm-wise, `‖g_fd − g_ad‖ / max(‖g_fd‖, ‖g_ad‖)`. Tensors whose
/// gradients both fall under the rounding noise floor of the difference quotient are
/// reported separately.
pub fn gradient_check(
    state: &TrainState,
    batch: &[&DatasetRecord],
    backbone: &Backbone,
    roles: &RoleSet,
    eps: f64,
    tolerance: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let obj = objective(state, batch, backbone, roles)?;
    let loss = nn::scalar_f64(&obj.loss)?;
    let grads = collect_grads(&state.params, &obj.loss.backward()?)?;
    let unit = if state.dtype() == DType::F64 { f64::EPSILON } else { f32::EPSILON as f64 };
    let noise_floor = unit * loss.abs().max(1.0) / eps;
    let mut rng = nn::seeded_rng(seed);
    let mut tensors = Vec::new();
    for (name, var) in state.params.iter() {
        let base = var.as_tensor().detach().copy()?;
        let shape = base.dims().to_vec();
        let values = nn::to_f64_vec(&base)?;
        let analytic = nn::to_f64_vec(&grads[name])?;
        let n = values.len();
        let coords: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < coords_per_tensor {
                picked.insert(rng.random_range(0..n));
            }
            picked.into_iter().collect()
        };
        let mut num = Vec::with_capacity(coords.len());
        for &i in &coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = values.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, shape.as_slice(), base.device())?.to_dtype(base.dtype())?;
                state.params.set(name, &t)?;
                nn::scalar_f64(&objective_f64_reduced(state, batch, backbone, roles)?.loss)
            };
            let plus = eval(eps)?;
            let minus = eval(-eps)?;
            num.push((plus - minus) / (2.0 * eps));
        }
        state.params.set(name, &base)?;
        let an: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: Vec<f64> = an.iter().zip(&num).map(|(a, b)| a - b).collect();
        let (na, nn_) = (norm(&an), norm(&num));
        let within_noise = norm(&diff) <= noise_floor * (coords.len() as f64).sqrt();
        let rel_error = if na.max(nn_) > 0.0 { norm(&diff) / na.max(nn_) } else { 0.0 };
        tensors.push(TensorGradCheck {
            name: name.clone(),
            coords: coords.len(),
            analytic_norm: na,
            numeric_norm: nn_,
            rel_error,
            within_noise,
            passed: rel_error < tolerance || within_noise,
        });
    }
    Ok(GradCheckReport { eps, tolerance, noise_floor, loss, tensors })
}
