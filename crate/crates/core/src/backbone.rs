//! The shared frozen decoder-only transformer.
//!
//! RMS pre-norm, rotary causal self-attention and a SiLU-gated MLP. Every projection
//! is a named [`ModuleKind`] so a transient low-rank branch can be attached to it
//! without touching the stored weights.

use std::cell::{Cell, RefCell};
use std::fmt;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TflowError};
use crate::fusion::AppliedPatch;
use crate::nn::{self, Rope};
use crate::optim::{collect_grads, AdamW, AdamWConfig, ParamSet};
use crate::tokenizer::{TokenSeq, EOS};

const NORM_EPS: f64 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub rope_base: f64,
    pub max_seq: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { vocab_size: 258, d_model: 64, n_layers: 4, n_heads: 4, d_ffn: 128, rope_base: 10000.0, max_seq: 256 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(TflowError::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(TflowError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return Err(TflowError::Config("head dimension must be even for rotary encoding".into()));
        }
        if self.max_seq < 2 {
            return Err(TflowError::Config("max_seq must be >= 2".into()));
        }
        if !(self.rope_base > 0.0) {
            return Err(TflowError::Config("rope_base must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// The seven patchable linear maps of a decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 7] =
        [ModuleKind::Q, ModuleKind::K, ModuleKind::V, ModuleKind::O, ModuleKind::Up, ModuleKind::Gate, ModuleKind::Down];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Q => "q",
            ModuleKind::K => "k",
            ModuleKind::V => "v",
            ModuleKind::O => "o",
            ModuleKind::Up => "up",
            ModuleKind::Gate => "gate",
            ModuleKind::Down => "down",
        }
    }

    /// `(d_in, d_out)` for this kind under `cfg`.
    pub fn dims(self, cfg: &BackboneConfig) -> (usize, usize) {
        match self {
            ModuleKind::Q | ModuleKind::K | ModuleKind::V | ModuleKind::O => (cfg.d_model, cfg.d_model),
            ModuleKind::Up | ModuleKind::Gate => (cfg.d_model, cfg.d_ffn),
            ModuleKind::Down => (cfg.d_ffn, cfg.d_model),
        }
    }

    pub fn weight_path(self) -> &'static str {
        match self {
            ModuleKind::Q => "attn.q",
            ModuleKind::K => "attn.k",
            ModuleKind::V => "attn.v",
            ModuleKind::O => "attn.o",
            ModuleKind::Up => "mlp.up",
            ModuleKind::Gate => "mlp.gate",
            ModuleKind::Down => "mlp.down",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub layer: usize,
    pub kind: ModuleKind,
    pub d_in: usize,
    pub d_out: usize,
}

impl ModuleSpec {
    pub fn new(cfg: &BackboneConfig, layer: usize, kind: ModuleKind) -> Self {
        let (d_in, d_out) = kind.dims(cfg);
        Self { layer, kind, d_in, d_out }
    }
}

/// Target list over every decoder layer, in `(layer, kind)` order.
pub fn module_specs(cfg: &BackboneConfig, kinds: &[ModuleKind]) -> Vec<ModuleSpec> {
    (0..cfg.n_layers)
        .flat_map(|l| kinds.iter().map(move |&k| ModuleSpec::new(cfg, l, k)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub o: Tensor,
    pub mlp_norm: Tensor,
    pub up: Tensor,
    pub gate: Tensor,
    pub down: Tensor,
}

impl LayerWeights {
    pub fn module(&self, kind: ModuleKind) -> &Tensor {
        match kind {
            ModuleKind::Q => &self.q,
            ModuleKind::K => &self.k,
            ModuleKind::V => &self.v,
            ModuleKind::O => &self.o,
            ModuleKind::Up => &self.up,
            ModuleKind::Gate => &self.gate,
            ModuleKind::Down => &self.down,
        }
    }
}

/// All backbone tensors. Weight matrices are stored `[d_out, d_in]`.
#[derive(Debug, Clone)]
pub struct BackboneWeights {
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl BackboneWeights {
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = nn::seeded_rng(seed);
        let d = cfg.d_model;
        let embed = nn::normal_tensor(&mut rng, &[cfg.vocab_size, d], INIT_STD)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mut mat = |kind: ModuleKind| {
                let (d_in, d_out) = kind.dims(cfg);
                nn::normal_tensor(&mut rng, &[d_out, d_in], INIT_STD)
            };
            layers.push(LayerWeights {
                attn_norm: nn::ones(&[d])?,
                q: mat(ModuleKind::Q)?,
                k: mat(ModuleKind::K)?,
                v: mat(ModuleKind::V)?,
                o: mat(ModuleKind::O)?,
                mlp_norm: nn::ones(&[d])?,
                up: mat(ModuleKind::Up)?,
                gate: mat(ModuleKind::Gate)?,
                down: mat(ModuleKind::Down)?,
            });
        }
        let head = nn::normal_tensor(&mut rng, &[cfg.vocab_size, d], INIT_STD)?;
        Ok(Self { embed, layers, final_norm: nn::ones(&[d])?, head })
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &lw.attn_norm));
            for kind in ModuleKind::ALL {
                out.push((format!("layers.{l}.{}", kind.weight_path()), lw.module(kind)));
            }
            out.push((format!("layers.{l}.mlp_norm"), &lw.mlp_norm));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (l, lw) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &mut lw.attn_norm));
            out.push((format!("layers.{l}.mlp_norm"), &mut lw.mlp_norm));
            let LayerWeights { q, k, v, o, up, gate, down, .. } = lw;
            for (kind, t) in [
                (ModuleKind::Q, q),
                (ModuleKind::K, k),
                (ModuleKind::V, v),
                (ModuleKind::O, o),
                (ModuleKind::Up, up),
                (ModuleKind::Gate, gate),
                (ModuleKind::Down, down),
            ] {
                out.push((format!("layers.{l}.{}", kind.weight_path()), t));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn module(&self, layer: usize, kind: ModuleKind) -> &Tensor {
        self.layers[layer].module(kind)
    }

    pub fn dtype(&self) -> DType {
        self.embed.dtype()
    }

    /// Copy with every tensor converted to `dtype` and detached.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = self.clone();
        for (_, t) in out.named_mut() {
            *t = t.to_dtype(dtype)?.detach();
        }
        Ok(out)
    }

    /// Rebuilds weights from named tensors, e.g. a checkpoint.
    pub fn from_named(
        cfg: &BackboneConfig,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut w = Self::init(cfg, 0)?;
        for (name, t) in w.named_mut() {
            let value = lookup(&name)
                .ok_or_else(|| TflowError::Format { tensor: name.clone(), reason: "missing".into() })?;
            if value.dims() != t.dims() {
                return Err(TflowError::Format {
                    tensor: name,
                    reason: format!("shape {:?}, expected {:?}", value.dims(), t.dims()),
                });
            }
            *t = value;
        }
        Ok(w)
    }

    /// SHA-256 over names, shapes and little-endian f32 payloads.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in nn::to_f32_vec(t)? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.elem_count()).sum()
    }
}

/// Hidden activations: index 0 is the embedding output, index `l + 1` the output of
/// decoder layer `l`. Each entry is `[T, d_model]`.
#[derive(Debug, Clone)]
pub struct HiddenStack(pub Vec<Tensor>);

impl HiddenStack {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn seq_len(&self) -> Result<usize> {
        Ok(self.0[0].dim(0)?)
    }

    /// `[L_total + 1, T, d]`
    pub fn stacked(&self) -> Result<Tensor> {
        Ok(Tensor::stack(&self.0, 0)?)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        Ok(Self(self.0.iter().map(|h| h * c).collect::<std::result::Result<_, _>>()?))
    }
}

/// Multiply-accumulate and position counters for one execution context.
#[derive(Debug, Default)]
pub struct Counters {
    base_macs: Cell<u64>,
    attn_macs: Cell<u64>,
    lora_macs: Cell<u64>,
    prefill_positions: Cell<u64>,
    decode_positions: Cell<u64>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    /// Dense projection, embedding-free head and other linear-map MACs.
    pub base_macs: u64,
    /// Attention score and readout MACs.
    pub attn_macs: u64,
    /// MACs spent in transient low-rank branches.
    pub lora_macs: u64,
    pub prefill_positions: u64,
    pub decode_positions: u64,
}

impl CounterSnapshot {
    pub fn backbone_macs(&self) -> u64 {
        self.base_macs + self.attn_macs
    }
}

fn bump(c: &Cell<u64>, n: usize) {
    c.set(c.get() + n as u64);
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            base_macs: self.base_macs.get(),
            attn_macs: self.attn_macs.get(),
            lora_macs: self.lora_macs.get(),
            prefill_positions: self.prefill_positions.get(),
            decode_positions: self.decode_positions.get(),
        }
    }

    pub fn reset(&self) {
        for c in [&self.base_macs, &self.attn_macs, &self.lora_macs, &self.prefill_positions, &self.decode_positions] {
            c.set(0);
        }
    }

    pub(crate) fn add_lora_macs(&self, n: usize) {
        bump(&self.lora_macs, n);
    }
}

/// Cached rotary keys and values per layer, `[B, H, T, hd]`.
#[derive(Debug, Default)]
pub struct KvCache {
    layers: Vec<Option<(Tensor, Tensor)>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub(crate) struct ForwardArgs<'a> {
    pub ids: &'a Tensor,
    /// Valid lengths per batch row for right-padded batches.
    pub lengths: Option<&'a [usize]>,
    pub cache: Option<&'a mut KvCache>,
    pub patch: Option<&'a AppliedPatch>,
    pub counters: Option<&'a Counters>,
    pub capture: bool,
}

pub(crate) struct ForwardOut {
    /// `[B, T, vocab]`
    pub logits: Tensor,
    /// `[B, T, d]` per captured layer.
    pub hidden: Vec<Tensor>,
}

fn project(
    x: &Tensor,
    w: &BackboneWeights,
    layer: usize,
    kind: ModuleKind,
    patch: Option<&AppliedPatch>,
    counters: Option<&Counters>,
) -> Result<Tensor> {
    let weight = w.module(layer, kind);
    let y = nn::linear(x, weight)?;
    if let Some(c) = counters {
        let rows = x.elem_count() / x.dim(D::Minus1)?;
        bump(&c.base_macs, rows * weight.dim(0)? * weight.dim(1)?);
    }
    match patch.and_then(|p| p.branch(layer, kind)) {
        Some(branch) => Ok((y + branch.apply(x, counters)?)?),
        None => Ok(y),
    }
}

pub(crate) fn run_forward(cfg: &BackboneConfig, w: &BackboneWeights, args: ForwardArgs<'_>) -> Result<ForwardOut> {
    let ForwardArgs { ids, lengths, mut cache, patch, counters, capture } = args;
    let (b, t) = ids.dims2()?;
    let dtype = w.dtype();
    let offset = cache.as_ref().map(|c| c.len).unwrap_or(0);
    if offset + t > cfg.max_seq {
        return Err(TflowError::SequenceLength { len: offset + t, max: cfg.max_seq });
    }
    if let Some(c) = counters {
        if offset == 0 {
            bump(&c.prefill_positions, b * t);
        } else {
            bump(&c.decode_positions, b * t);
        }
    }
    let d = cfg.d_model;
    let mut h = w.embed.index_select(&ids.flatten_all()?, 0)?.reshape((b, t, d))?;
    let mut hidden = Vec::new();
    if capture {
        hidden.push(h.clone());
    }
    let rope = Rope::range(offset, t, cfg.head_dim(), cfg.rope_base, dtype)?;
    let tk = offset + t;
    let mut mask = nn::causal_mask(t, tk, offset, dtype)?;
    if let Some(lens) = lengths {
        mask = mask.broadcast_add(&nn::key_padding_mask(lens, tk, dtype)?)?;
    }
    if let Some(c) = cache.as_deref_mut() {
        if c.layers.is_empty() {
            c.layers = vec![None; cfg.n_layers];
        }
    }
    for (l, lw) in w.layers.iter().enumerate() {
        let x = nn::rms_norm(&h, &lw.attn_norm, NORM_EPS)?;
        let q = nn::split_heads(&project(&x, w, l, ModuleKind::Q, patch, counters)?, cfg.n_heads)?;
        let k = nn::split_heads(&project(&x, w, l, ModuleKind::K, patch, counters)?, cfg.n_heads)?;
        let v = nn::split_heads(&project(&x, w, l, ModuleKind::V, patch, counters)?, cfg.n_heads)?;
        let q = rope.apply(&q)?;
        let mut k = rope.apply(&k)?;
        let mut v = v;
        if let Some(c) = cache.as_deref_mut() {
            if let Some((pk, pv)) = &c.layers[l] {
                k = Tensor::cat(&[pk, &k], 2)?;
                v = Tensor::cat(&[pv, &v], 2)?;
            }
            c.layers[l] = Some((k.clone(), v.clone()));
        }
        if let Some(c) = counters {
            bump(&c.attn_macs, 2 * b * t * tk * d);
        }
        let att = nn::merge_heads(&nn::attend(&q, &k, &v, Some(&mask))?)?;
        h = (h + project(&att, w, l, ModuleKind::O, patch, counters)?)?;
        let x = nn::rms_norm(&h, &lw.mlp_norm, NORM_EPS)?;
        let gate = nn::silu(&project(&x, w, l, ModuleKind::Gate, patch, counters)?)?;
        let up = project(&x, w, l, ModuleKind::Up, patch, counters)?;
        h = (&h + project(&(gate * up)?, w, l, ModuleKind::Down, patch, counters)?)?;
        if capture {
            hidden.push(h.clone());
        }
    }
    if let Some(c) = cache {
        c.len += t;
    }
    let logits = nn::linear(&nn::rms_norm(&h, &w.final_norm, NORM_EPS)?, &w.head)?;
    if let Some(c) = counters {
        bump(&c.base_macs, b * t * d * cfg.vocab_size);
    }
    Ok(ForwardOut { logits, hidden })
}

/// Analytic MACs of one unpatched forward over `t` positions without a cache; matches
/// what the instrumented counters record for the same call.
pub fn forward_macs(cfg: &BackboneConfig, t: usize) -> u64 {
    let d = cfg.d_model;
    let per_layer: usize = ModuleKind::ALL
        .iter()
        .map(|k| {
            let (i, o) = k.dims(cfg);
            t * i * o
        })
        .sum::<usize>()
        + 2 * t * t * d;
    (cfg.n_layers * per_layer + t * d * cfg.vocab_size) as u64
}

pub(crate) fn ids_tensor(tokens: &[u32]) -> Result<Tensor> {
    Ok(Tensor::from_vec(tokens.to_vec(), (1, tokens.len()), &Device::Cpu)?)
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    weights: BackboneWeights,
    frozen_hash: Option<String>,
}

impl Backbone {
    /// Seeded initialization; the model stays mutable until [`Backbone::freeze`].
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = BackboneWeights::init(&config, seed)?;
        Ok(Self { config, weights, frozen_hash: None })
    }

    /// Wraps existing weights (e.g. from a checkpoint) and freezes them.
    pub fn from_weights(config: BackboneConfig, weights: BackboneWeights) -> Result<Self> {
        config.validate()?;
        let mut b = Self { config, weights: weights.to_dtype(DType::F32)?, frozen_hash: None };
        b.freeze()?;
        Ok(b)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn weights(&self) -> &BackboneWeights {
        &self.weights
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_hash.is_some()
    }

    /// Freezes the weights and records their content hash. Idempotent.
    pub fn freeze(&mut self) -> Result<String> {
        if let Some(h) = &self.frozen_hash {
            return Ok(h.clone());
        }
        self.weights = self.weights.to_dtype(DType::F32)?;
        let h = self.weights.content_hash()?;
        self.frozen_hash = Some(h.clone());
        Ok(h)
    }

    pub fn frozen_hash(&self) -> Option<&str> {
        self.frozen_hash.as_deref()
    }

    /// Recomputes the hash from the current weights.
    pub fn weight_hash(&self) -> Result<String> {
        self.weights.content_hash()
    }

    pub(crate) fn require_frozen(&self) -> Result<()> {
        if self.is_frozen() {
            Ok(())
        } else {
            Err(TflowError::State("backbone must be frozen".into()))
        }
    }

    /// Copy of this backbone computing in `dtype` (f64 is used by gradient checks).
    pub fn with_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self { config: self.config.clone(), weights: self.weights.to_dtype(dtype)?, frozen_hash: self.frozen_hash.clone() })
    }

    pub fn dtype(&self) -> DType {
        self.weights.dtype()
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(TflowError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(TflowError::SequenceLength { len: tokens.len(), max: self.config.max_seq });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(TflowError::Input(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// One unpatched forward returning `[T, vocab]` logits and every hidden layer.
    pub fn forward_capture(&self, tokens: &[u32]) -> Result<(Tensor, HiddenStack)> {
        ExecContext::new(self)?.forward_capture(tokens)
    }
}

/// An execution context over a frozen backbone: holds at most one applied patch and
/// the counters for every position it pushes through the model.
#[derive(Debug)]
pub struct ExecContext<'a> {
    backbone: &'a Backbone,
    pub(crate) patch: RefCell<Option<AppliedPatch>>,
    counters: Counters,
}

impl<'a> ExecContext<'a> {
    pub fn new(backbone: &'a Backbone) -> Result<Self> {
        backbone.require_frozen()?;
        Ok(Self { backbone, patch: RefCell::new(None), counters: Counters::default() })
    }

    pub fn backbone(&self) -> &'a Backbone {
        self.backbone
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }

    pub fn reset_counters(&self) {
        self.counters.reset()
    }

    pub fn has_patch(&self) -> bool {
        self.patch.borrow().is_some()
    }

    /// Forward over `tokens` with the applied patch (if any), returning `[T, vocab]`.
    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        self.backbone.check_tokens(tokens)?;
        let ids = ids_tensor(tokens)?;
        let patch = self.patch.borrow();
        let out = run_forward(
            &self.backbone.config,
            &self.backbone.weights,
            ForwardArgs {
                ids: &ids,
                lengths: None,
                cache: None,
                patch: patch.as_ref(),
                counters: Some(&self.counters),
                capture: false,
            },
        )?;
        Ok(out.logits.squeeze(0)?)
    }

    pub fn forward_capture(&self, tokens: &[u32]) -> Result<(Tensor, HiddenStack)> {
        self.backbone.check_tokens(tokens)?;
        let ids = ids_tensor(tokens)?;
        let patch = self.patch.borrow();
        let out = run_forward(
            &self.backbone.config,
            &self.backbone.weights,
            ForwardArgs {
                ids: &ids,
                lengths: None,
                cache: None,
                patch: patch.as_ref(),
                counters: Some(&self.counters),
                capture: true,
            },
        )?;
        let hidden = out.hidden.iter().map(|h| h.squeeze(0)).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok((out.logits.squeeze(0)?, HiddenStack(hidden)))
    }

    fn step(&self, tokens: &[u32], cache: &mut KvCache) -> Result<Tensor> {
        let ids = ids_tensor(tokens)?;
        let patch = self.patch.borrow();
        let out = run_forward(
            &self.backbone.config,
            &self.backbone.weights,
            ForwardArgs {
                ids: &ids,
                lengths: None,
                cache: Some(cache),
                patch: patch.as_ref(),
                counters: Some(&self.counters),
                capture: false,
            },
        )?;
        let last = out.logits.dim(1)? - 1;
        Ok(out.logits.squeeze(0)?.get(last)?)
    }

    /// Autoregressive continuation of `prompt` under whatever patch is applied.
    ///
    /// Every emitted token (EOS included) is fed back through the model, so the
    /// positions pushed through forward passes equal `prompt.len() + output.len()`.
    pub fn generate(&self, prompt: &[u32], params: &DecodeParams) -> Result<TokenSeq> {
        let max_seq = self.backbone.config.max_seq;
        if prompt.is_empty() {
            return Err(TflowError::Input("empty prompt".into()));
        }
        if prompt.len() >= max_seq {
            return Err(TflowError::SequenceLength { len: prompt.len(), max: max_seq - 1 });
        }
        self.backbone.check_tokens(prompt)?;
        let budget = params.max_new.min(max_seq - prompt.len());
        let mut out = Vec::with_capacity(budget);
        if budget == 0 {
            return Ok(out);
        }
        let mut rng = nn::seeded_rng(params.seed);
        let mut cache = KvCache::default();
        let mut logits = self.step(prompt, &mut cache)?;
        loop {
            let tok = params.mode.pick(&logits, &mut rng)?;
            out.push(tok);
            logits = self.step(&[tok], &mut cache)?;
            if tok == EOS || out.len() == budget {
                break;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, top_p: f64 },
}

impl DecodeMode {
    fn pick(&self, logits: &Tensor, rng: &mut nn::Rng) -> Result<u32> {
        let v = nn::to_f64_vec(logits)?;
        match *self {
            DecodeMode::Greedy => {
                let mut best = 0;
                for (i, &x) in v.iter().enumerate() {
                    if x > v[best] {
                        best = i;
                    }
                }
                Ok(best as u32)
            }
            DecodeMode::Sample { temperature, top_p } => {
                if !(temperature > 0.0) || !(top_p > 0.0 && top_p <= 1.0) {
                    return Err(TflowError::Config("temperature must be > 0 and top_p in (0, 1]".into()));
                }
                let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut probs: Vec<(usize, f64)> =
                    v.iter().enumerate().map(|(i, &x)| (i, ((x - m) / temperature).exp())).collect();
                let z: f64 = probs.iter().map(|p| p.1).sum();
                for p in probs.iter_mut() {
                    p.1 /= z;
                }
                probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let mut keep = 0;
                let mut cum = 0.0;
                for p in &probs {
                    keep += 1;
                    cum += p.1;
                    if cum >= top_p {
                        break;
                    }
                }
                let nucleus = &probs[..keep];
                let mass: f64 = nucleus.iter().map(|p| p.1).sum();
                let mut u = rng.random::<f64>() * mass;
                for p in nucleus {
                    if u < p.1 {
                        return Ok(p.0 as u32);
                    }
                    u -= p.1;
                }
                Ok(nucleus[keep - 1].0 as u32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub max_new: usize,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { mode: DecodeMode::Greedy, max_new: 16, seed: 0 }
    }
}

impl DecodeParams {
    pub fn greedy(max_new: usize) -> Self {
        Self { mode: DecodeMode::Greedy, max_new, seed: 0 }
    }
}

/// A token sequence with the positions whose token is a prediction target.
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub tokens: TokenSeq,
    /// `mask[u]` marks token `u` as a target predicted from position `u - 1`.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Cosine decay floor as a fraction of the peak learning rate.
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 32,
            optimizer: AdamWConfig { lr: 3e-3, weight_decay: 0.01, ..AdamWConfig::default() },
            seed: 7,
            min_lr_ratio: 0.1,
            warmup_steps: 100,
        }
    }
}

pub(crate) fn schedule_lr(base: f64, step: usize, total: usize, warmup: usize, min_ratio: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (min_ratio + (1.0 - min_ratio) * cos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Mean masked loss (nats/token) over the last `min(100, steps)` steps.
    pub final_loss: Option<f64>,
    pub loss_trace: Vec<f64>,
    pub weight_hash: String,
}

/// Right-pads a batch with id 0; returns ids `[B, T]`, lengths, and the target mask.
pub(crate) fn pad_batch(examples: &[&LmExample]) -> Result<(Tensor, Vec<usize>, Tensor)> {
    let t = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    let b = examples.len();
    let mut ids = vec![0u32; b * t];
    let mut mask = vec![0f32; b * t];
    let mut lengths = Vec::with_capacity(b);
    for (i, e) in examples.iter().enumerate() {
        lengths.push(e.tokens.len());
        for (j, (&tok, &m)) in e.tokens.iter().zip(&e.mask).enumerate() {
            ids[i * t + j] = tok;
            mask[i * t + j] = if m { 1.0 } else { 0.0 };
        }
    }
    Ok((
        Tensor::from_vec(ids, (b, t), &Device::Cpu)?,
        lengths,
        Tensor::from_vec(mask, (b, t), &Device::Cpu)?,
    ))
}

/// Next-token training of an unfrozen backbone; freezes it on completion.
pub fn pretrain_backbone(backbone: &mut Backbone, corpus: &[LmExample], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if backbone.is_frozen() {
        return Err(TflowError::State("backbone is already frozen".into()));
    }
    if cfg.steps > 0 && (corpus.is_empty() || cfg.batch_size == 0) {
        return Err(TflowError::Input("pretraining needs a non-empty corpus and batch".into()));
    }
    for e in corpus {
        if e.tokens.len() != e.mask.len() || e.mask.first() == Some(&true) {
            return Err(TflowError::Input("malformed pretraining example mask".into()));
        }
        backbone.check_tokens(&e.tokens)?;
    }
    let mut params = ParamSet::new();
    let mut live = backbone.weights.clone();
    for (name, t) in live.named_mut() {
        *t = params.register(name, t.clone())?;
    }
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = nn::seeded_rng(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        opt.config.lr = schedule_lr(cfg.optimizer.lr, step, cfg.steps, cfg.warmup_steps, cfg.min_lr_ratio);
        let batch: Vec<&LmExample> =
            (0..cfg.batch_size).map(|_| &corpus[rng.random_range(0..corpus.len())]).collect();
        let (ids, lengths, mask) = pad_batch(&batch)?;
        let out = run_forward(
            &backbone.config,
            &live,
            ForwardArgs { ids: &ids, lengths: Some(&lengths), cache: None, patch: None, counters: None, capture: false },
        )?;
        let loss = nn::masked_next_token_nll(&out.logits, &ids, &mask)?;
        let value = nn::scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(TflowError::Training(format!("non-finite pretraining loss at step {step}")));
        }
        trace.push(value);
        let grads = collect_grads(&params, &loss.backward()?)?;
        opt.step(&params, &grads)?;
        if step % 250 == 0 {
            log::info!("pretrain step {step} loss {value:.4}");
        }
    }
    let trained = params.snapshot()?;
    let mut weights = backbone.weights.clone();
    for (name, t) in weights.named_mut() {
        *t = trained[&name].clone();
    }
    backbone.weights = weights;
    let hash = backbone.freeze()?;
    let tail = trace.len().min(100);
    let final_loss = (tail > 0).then(|| trace[trace.len() - tail..].iter().sum::<f64>() / tail as f64);
    Ok(PretrainReport { steps: cfg.steps, final_loss, loss_trace: trace, weight_hash: hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{tokenize, BOS};

    fn tiny() -> BackboneConfig {
        BackboneConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ffn: 24, max_seq: 32, ..Default::default() }
    }

    fn frozen(cfg: BackboneConfig, seed: u64) -> Backbone {
        let mut b = Backbone::build(cfg, seed).unwrap();
        b.freeze().unwrap();
        b
    }

    #[test]
    fn build_is_deterministic() {
        let a = Backbone::build(BackboneConfig::default(), 7).unwrap();
        let b = Backbone::build(BackboneConfig::default(), 7).unwrap();
        let c = Backbone::build(BackboneConfig::default(), 8).unwrap();
        assert_eq!(a.weight_hash().unwrap(), b.weight_hash().unwrap());
        assert_ne!(a.weight_hash().unwrap(), c.weight_hash().unwrap());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = BackboneConfig { d_model: 65, n_heads: 4, ..Default::default() };
        assert!(matches!(Backbone::build(cfg, 7), Err(TflowError::Config(_))));
    }

    #[test]
    fn zero_counts_rejected() {
        let cfg = BackboneConfig { n_layers: 0, ..Default::default() };
        assert!(Backbone::build(cfg, 1).is_err());
        let cfg = BackboneConfig { max_seq: 1, ..Default::default() };
        assert!(Backbone::build(cfg, 1).is_err());
    }

    #[test]
    fn capture_shapes_default_config() {
        let b = frozen(BackboneConfig::default(), 7);
        let toks = [BOS, 1, 2, 3, 4, 5];
        let (logits, hidden) = b.forward_capture(&toks).unwrap();
        assert_eq!(hidden.len(), 5);
        for h in &hidden.0 {
            assert_eq!(h.dims(), &[6, 64]);
        }
        assert_eq!(logits.dims(), &[6, 258]);
        let p = nn::softmax_last(&logits).unwrap();
        for row in p.to_vec2::<f32>().unwrap() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let b = frozen(tiny(), 3);
        let toks = tokenize("hello");
        let (a, _) = b.forward_capture(&toks).unwrap();
        let (c, _) = b.forward_capture(&toks).unwrap();
        assert_eq!(nn::to_f32_vec(&a).unwrap(), nn::to_f32_vec(&c).unwrap());
    }

    #[test]
    fn forward_requires_frozen_and_valid_length() {
        let b = Backbone::build(tiny(), 3).unwrap();
        assert!(matches!(b.forward_capture(&[1, 2]), Err(TflowError::State(_))));
        let b = frozen(tiny(), 3);
        assert!(matches!(b.forward_capture(&[]), Err(TflowError::Input(_))));
        let long = vec![1u32; 33];
        assert!(matches!(b.forward_capture(&long), Err(TflowError::SequenceLength { .. })));
    }

    #[test]
    fn kv_cache_decode_matches_full_forward() {
        let b = frozen(tiny(), 5);
        let ctx = ExecContext::new(&b).unwrap();
        let toks = tokenize("abcdef");
        let full = ctx.logits(&toks).unwrap();
        let mut cache = KvCache::default();
        ctx.step(&toks[..4], &mut cache).unwrap();
        ctx.step(&toks[4..5], &mut cache).unwrap();
        let last = ctx.step(&toks[5..6], &mut cache).unwrap();
        let want = nn::to_f32_vec(&full.get(5).unwrap()).unwrap();
        let got = nn::to_f32_vec(&last).unwrap();
        for (x, y) in want.iter().zip(&got) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn greedy_generation_is_deterministic_and_bounded() {
        let b = frozen(tiny(), 9);
        let ctx = ExecContext::new(&b).unwrap();
        let p = [BOS, 10, 11];
        let a = ctx.generate(&p, &DecodeParams::greedy(6)).unwrap();
        let c = ctx.generate(&p, &DecodeParams::greedy(6)).unwrap();
        assert_eq!(a, c);
        assert!(a.len() <= 6);
        assert!(ctx.generate(&p, &DecodeParams::greedy(0)).unwrap().is_empty());
        let too_long = vec![1u32; 32];
        assert!(matches!(ctx.generate(&too_long, &DecodeParams::greedy(1)), Err(TflowError::SequenceLength { .. })));
    }

    #[test]
    fn seeded_sampling_repeats() {
        let b = frozen(tiny(), 9);
        let ctx = ExecContext::new(&b).unwrap();
        let params = DecodeParams { mode: DecodeMode::Sample { temperature: 0.6, top_p: 0.95 }, max_new: 8, seed: 42 };
        let a = ctx.generate(&[BOS, 3], &params).unwrap();
        let c = ctx.generate(&[BOS, 3], &params).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn counters_track_positions_and_macs() {
        let cfg = tiny();
        let b = frozen(cfg.clone(), 2);
        let ctx = ExecContext::new(&b).unwrap();
        ctx.logits(&[BOS, 5, 6, 7]).unwrap();
        let s = ctx.counters();
        assert_eq!(s.prefill_positions, 4);
        assert_eq!(s.backbone_macs(), forward_macs(&cfg, 4));
        ctx.reset_counters();
        let out = ctx.generate(&[BOS, 5], &DecodeParams::greedy(3)).unwrap();
        let s = ctx.counters();
        assert_eq!(s.prefill_positions, 2);
        assert_eq!(s.decode_positions as usize, out.len());
    }

    #[test]
    fn pretrain_zero_steps_keeps_init_then_freezes() {
        let mut b = Backbone::build(tiny(), 11).unwrap();
        let before = b.weight_hash().unwrap();
        let report = pretrain_backbone(&mut b, &[], &PretrainConfig { steps: 0, ..Default::default() }).unwrap();
        assert!(b.is_frozen());
        assert_eq!(report.weight_hash, before);
        let again = pretrain_backbone(&mut b, &[], &PretrainConfig { steps: 0, ..Default::default() });
        assert!(matches!(again, Err(TflowError::State(_))));
    }

    #[test]
    fn pretrain_reduces_loss_on_a_fixed_string() {
        let mut b = Backbone::build(tiny(), 1).unwrap();
        let tokens = crate::tokenizer::with_bos(&["abcabc"]);
        let mask = (0..tokens.len()).map(|i| i > 0).collect();
        let corpus = vec![LmExample { tokens, mask }];
        let cfg = PretrainConfig { steps: 60, batch_size: 2, warmup_steps: 5, ..Default::default() };
        let r = pretrain_backbone(&mut b, &corpus, &cfg).unwrap();
        assert!(r.loss_trace[59] < r.loss_trace[0] * 0.5, "{:?}", (r.loss_trace[0], r.loss_trace[59]));
    }
}
