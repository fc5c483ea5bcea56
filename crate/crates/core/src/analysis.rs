//! Instance-specificity analyses, ablations and the analytic cost model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_macs, Backbone, BackboneConfig, DecodeParams, ExecContext, ModuleKind};
use crate::error::{Result, TflowError};
use crate::fusion::{apply_scoped, fuse_batch, TransientPatch};
use crate::generator::{FactorBatch, GeneratorConfig, Layout, LoraFactorSet};
use crate::nn;
use crate::optim::{collect_grads, AdamW, ParamSet};
use crate::pipeline::{self, exact_match, RoleSet};
use crate::training::{batch_indices, task_loss, DatasetRecord, Mode, SenderBatch, TflowModel, TrainConfig};

/// Every dense per-module update of one query, flattened in `(layer, module)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub values: Vec<f64>,
}

impl Fingerprint {
    pub fn from_patch(patch: &TransientPatch) -> Result<Self> {
        Ok(Self { values: nn::to_f64_vec(&patch.flatten_dense()?)? })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity; `NaN` (with a warning) when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine of a zero vector is undefined");
        return f64::NAN;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Fingerprint of the fused patch the senders produce for `rec`; nothing is decoded.
pub fn fingerprint(
    model: &TflowModel,
    backbone: &Backbone,
    roles: &RoleSet,
    rec: &DatasetRecord,
    mode: Mode,
) -> Result<Fingerprint> {
    let (patch, _, _) = pipeline::build_patch(model, backbone, roles, &rec.query, &rec.context, mode)?;
    Fingerprint::from_patch(&patch)
}

/// Mean pairwise cosines between labelled groups. Diagonal entries average the
/// `n(n−1)/2` distinct within-group pairs; off-diagonal entries average all cross pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub pairs: Vec<Vec<usize>>,
}

impl SimilarityMatrix {
    pub fn from_groups(groups: &[(String, Vec<Vec<f64>>)]) -> Result<Self> {
        if let Some((label, g)) = groups.iter().find(|(_, g)| g.len() < 2) {
            return Err(TflowError::Input(format!("group `{label}` has {} vectors, need at least 2", g.len())));
        }
        let n = groups.len();
        let mut values = vec![vec![0.0; n]; n];
        let mut pairs = vec![vec![0usize; n]; n];
        for i in 0..n {
            for j in i..n {
                let (a, b) = (&groups[i].1, &groups[j].1);
                let (mut sum, mut count) = (0.0, 0usize);
                for (p, x) in a.iter().enumerate() {
                    let start = if i == j { p + 1 } else { 0 };
                    for y in &b[start..] {
                        sum += cosine(x, y);
                        count += 1;
                    }
                }
                let mean = sum / count as f64;
                values[i][j] = mean;
                values[j][i] = mean;
                pairs[i][j] = count;
                pairs[j][i] = count;
            }
        }
        Ok(Self { labels: groups.iter().map(|(l, _)| l.clone()).collect(), values, pairs })
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.labels.len();
        (0..n).all(|i| (0..n).all(|j| (self.values[i][j] - self.values[j][i]).abs() <= tol))
    }

    /// Per row, the diagonal minus the largest off-diagonal entry.
    pub fn diagonal_margins(&self) -> Vec<f64> {
        let n = self.labels.len();
        (0..n)
            .map(|i| {
                let off = (0..n).filter(|&j| j != i).map(|j| self.values[i][j]).fold(f64::NEG_INFINITY, f64::max);
                self.values[i][i] - off
            })
            .collect()
    }

    pub fn within_mean(&self) -> f64 {
        let n = self.labels.len();
        (0..n).map(|i| self.values[i][i]).sum::<f64>() / n as f64
    }

    /// Mean over the distinct off-diagonal entries; `NaN` for a single group.
    pub fn cross_mean(&self) -> f64 {
        let n = self.labels.len();
        let off: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| self.values[i][j]).collect();
        off.iter().sum::<f64>() / off.len() as f64
    }

    /// Header row of labels, then one row per label.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (label, row) in self.labels.iter().zip(&self.values) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| TflowError::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> TflowError {
    TflowError::Io(std::io::Error::other(e.to_string()))
}

/// Source-by-source similarity of fingerprints.
pub fn fingerprint_matrix(
    model: &TflowModel,
    backbone: &Backbone,
    roles: &RoleSet,
    mode: Mode,
    datasets: &BTreeMap<String, Vec<DatasetRecord>>,
) -> Result<SimilarityMatrix> {
    let mut groups = Vec::new();
    for (source, recs) in datasets {
        if recs.len() < 2 {
            return Err(TflowError::Input(format!("source `{source}` has {} records, need at least 2", recs.len())));
        }
        let fps = recs
            .iter()
            .map(|r| fingerprint(model, backbone, roles, r, mode).map(|f| f.values))
            .collect::<Result<Vec<_>>>()?;
        groups.push((source.clone(), fps));
    }
    SimilarityMatrix::from_groups(&groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    /// 0 is the embedding output, `l` the output of block `l`.
    pub layer: usize,
    pub within: f64,
    pub cross: f64,
    pub matrix: SimilarityMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenReport {
    pub layers: Vec<LayerSimilarity>,
    pub aggregated: LayerSimilarity,
    pub rho: Vec<f64>,
}

impl HiddenReport {
    /// Whitespace-separated `layer within cross` rows, readable by gnuplot.
    pub fn to_dat(&self) -> String {
        let mut out = String::from("# layer within cross rho\n");
        for (l, rho) in self.layers.iter().zip(&self.rho) {
            let _ = writeln!(out, "{} {:.6} {:.6} {:.6}", l.layer, l.within, l.cross, rho);
        }
        out
    }
}

/// Per-layer similarity of the last-token hidden state of the first sender's input,
/// and the same for the `rho`-weighted aggregate. `rho` defaults to uniform weights.
pub fn hidden_similarity_report(
    backbone: &Backbone,
    roles: &RoleSet,
    rho: Option<&[f64]>,
    datasets: &BTreeMap<String, Vec<DatasetRecord>>,
    mode: Mode,
) -> Result<HiddenReport> {
    roles.require_senders()?;
    let n_entries = backbone.config().n_layers + 1;
    let rho: Vec<f64> = match rho {
        Some(r) if r.len() == n_entries => r.to_vec(),
        Some(r) => return Err(TflowError::Shape(format!("{} layer weights for {n_entries} hidden entries", r.len()))),
        None => vec![1.0 / n_entries as f64; n_entries],
    };
    let role = &roles.senders[0];
    // per layer entry, per source, the last-token vectors
    let mut per_layer: Vec<Vec<(String, Vec<Vec<f64>>)>> = vec![Vec::new(); n_entries + 1];
    for (source, recs) in datasets {
        if recs.len() < 2 {
            return Err(TflowError::Input(format!("source `{source}` has {} records, need at least 2", recs.len())));
        }
        let mut by_layer: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(recs.len()); n_entries + 1];
        for rec in recs {
            let (_, hidden) = backbone.forward_capture(&pipeline::sender_tokens(role, rec, mode))?;
            let t = hidden.seq_len()?;
            let mut agg = vec![0.0; backbone.config().d_model];
            for (l, h) in hidden.0.iter().enumerate() {
                let last = nn::to_f64_vec(&h.get(t - 1)?)?;
                for (a, v) in agg.iter_mut().zip(&last) {
                    *a += rho[l] * v;
                }
                by_layer[l].push(last);
            }
            by_layer[n_entries].push(agg);
        }
        for (l, vecs) in by_layer.into_iter().enumerate() {
            per_layer[l].push((source.clone(), vecs));
        }
    }
    let mut layers = Vec::with_capacity(n_entries + 1);
    for (layer, groups) in per_layer.iter().enumerate() {
        let matrix = SimilarityMatrix::from_groups(groups)?;
        layers.push(LayerSimilarity { layer, within: matrix.within_mean(), cross: matrix.cross_mean(), matrix });
    }
    let aggregated = layers.pop().expect("aggregate entry");
    Ok(HiddenReport { layers, aggregated, rho })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Accuracy {
    fn add(&mut self, ok: bool) {
        self.correct += ok as usize;
        self.total += 1;
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

/// Exact-match accuracy overall and per source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub overall: Accuracy,
    pub per_source: BTreeMap<String, Accuracy>,
}

impl AccuracyTable {
    pub fn add(&mut self, source: &str, ok: bool) {
        self.overall.add(ok);
        self.per_source.entry(source.to_string()).or_default().add(ok);
    }

    pub fn source(&self, source: &str) -> f64 {
        self.per_source.get(source).map_or(f64::NAN, |a| a.accuracy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Matched,
    SameSource,
    CrossSource,
    Random,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Matched, Condition::SameSource, Condition::CrossSource, Condition::Random];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub conditions: BTreeMap<Condition, AccuracyTable>,
    /// Receiver decoding with no patch at all.
    pub zero_patch: AccuracyTable,
    pub random_std_a: f64,
    pub random_std_b: f64,
}

pub const MISMATCH_MIN_PER_SOURCE: usize = 50;

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Receiver accuracy when each query's patch is replaced by another query's patch from
/// the same source, from a different source, or by random factors of matched scale.
pub fn mismatch_ablation(
    model: &TflowModel,
    backbone: &Backbone,
    roles: &RoleSet,
    eval: &[DatasetRecord],
    mode: Mode,
    decode: &DecodeParams,
    seed: u64,
) -> Result<MismatchReport> {
    roles.require_senders()?;
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in eval.iter().enumerate() {
        by_source.entry(r.source.as_str()).or_default().push(i);
    }
    if let Some((s, v)) = by_source.iter().find(|(_, v)| v.len() < MISMATCH_MIN_PER_SOURCE) {
        return Err(TflowError::Input(format!(
            "source `{s}` has {} eval records, need at least {MISMATCH_MIN_PER_SOURCE}",
            v.len()
        )));
    }
    if by_source.len() < 2 {
        return Err(TflowError::Input("cross-source condition needs at least two sources".into()));
    }
    let n_s = roles.senders.len();
    let mut patches = Vec::with_capacity(eval.len());
    let mut factors: Option<FactorBatch> = None;
    let (mut a_entries, mut b_entries) = (Vec::new(), Vec::new());
    for rec in eval {
        let (stacks, _, _) = pipeline::capture_senders_counted(backbone, roles, &rec.query, &rec.context, mode)?;
        let out = model.sender_outputs(&SenderBatch::from_stacks(&stacks)?)?;
        for g in 0..n_s {
            let (a, b) = out.factors.instance(g)?.entries()?;
            a_entries.extend(a);
            b_entries.extend(b);
        }
        patches.push(model.patch(&out, 0, n_s)?.detached());
        factors.get_or_insert(out.factors);
    }
    let shapes = factors.expect("non-empty eval set");
    let (std_a, std_b) = (std_dev(&a_entries), std_dev(&b_entries));
    let mut rng = nn::seeded_rng(seed);
    let cfg = &model.gen.config;
    let uniform = (Tensor::ones(n_s, DType::F32, &candle_core::Device::Cpu)? / n_s as f64)?;
    let mut conditions: BTreeMap<Condition, AccuracyTable> = BTreeMap::new();
    let mut zero_patch = AccuracyTable::default();
    for (i, rec) in eval.iter().enumerate() {
        let same = &by_source[rec.source.as_str()];
        let others: Vec<usize> =
            by_source.iter().filter(|(s, _)| **s != rec.source.as_str()).flat_map(|(_, v)| v.iter().copied()).collect();
        let same_pick = loop {
            let j = same[rng.random_range(0..same.len())];
            if j != i {
                break j;
            }
        };
        let cross_pick = others[rng.random_range(0..others.len())];
        let random = FactorBatch {
            kinds: shapes.kinds.clone(),
            n_layers: shapes.n_layers,
            rank: shapes.rank,
            a: shapes.a.iter().map(|t| nn::normal_tensor(&mut rng, t.dims(), std_a as f32)).collect::<Result<_>>()?,
            b: shapes.b.iter().map(|t| nn::normal_tensor(&mut rng, t.dims(), std_b as f32)).collect::<Result<_>>()?,
        };
        let random_patch = fuse_batch(&random, &uniform.to_dtype(backbone.dtype())?, cfg.alpha, cfg.rank)?;
        for cond in Condition::ALL {
            let mut patch = match cond {
                Condition::Matched => patches[i].clone(),
                Condition::SameSource => patches[same_pick].clone(),
                Condition::CrossSource => patches[cross_pick].clone(),
                Condition::Random => random_patch.clone(),
            };
            let (_, out, _) = pipeline::receiver_decode(backbone, roles, &rec.query, Some(&mut patch), decode)?;
            let answer = crate::tokenizer::detokenize(&out);
            conditions.entry(cond).or_default().add(&rec.source, exact_match(&answer, &rec.target));
        }
        let (_, out, _) = pipeline::receiver_decode(backbone, roles, &rec.query, None, decode)?;
        zero_patch.add(&rec.source, exact_match(&crate::tokenizer::detokenize(&out), &rec.target));
    }
    Ok(MismatchReport { conditions, zero_patch, random_std_a: std_a, random_std_b: std_b })
}

/// One input-independent factor set shared by every query.
#[derive(Debug, Clone)]
pub struct StaticLora {
    pub params: ParamSet,
    pub factors: LoraFactorSet,
    pub alpha: f64,
}

impl StaticLora {
    /// `A` entries are drawn with std `1/√d_in`; `B` starts at zero.
    pub fn init(bcfg: &BackboneConfig, gcfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        let layout = Layout::new(bcfg, gcfg)?;
        let mut rng = nn::seeded_rng(seed ^ 0x0057_A71C);
        let mut params = ParamSet::new();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for &kind in &layout.kinds {
            let (d_in, d_out) = layout.dims(kind);
            let init_a = nn::normal_tensor(&mut rng, &[layout.n_layers, layout.rank, d_in], 1.0 / (d_in as f32).sqrt())?;
            a.push(params.register(format!("static.a.{kind}"), init_a)?);
            b.push(params.register(format!("static.b.{kind}"), nn::zeros(&[layout.n_layers, d_out, layout.rank])?)?);
        }
        let factors =
            LoraFactorSet { kinds: layout.kinds.clone(), n_layers: layout.n_layers, rank: layout.rank, a, b };
        Ok(Self { params, factors, alpha: gcfg.alpha })
    }

    pub fn patch(&self) -> Result<TransientPatch> {
        let one = Tensor::ones(1, self.factors.a[0].dtype(), self.factors.a[0].device())?;
        crate::fusion::fuse(std::slice::from_ref(&self.factors), &one, self.alpha, self.factors.rank)
    }

    /// Mean receiver task loss over `batch` under the shared patch.
    pub fn loss(&self, backbone: &Backbone, roles: &RoleSet, batch: &[&DatasetRecord]) -> Result<Tensor> {
        let ctx = ExecContext::new(backbone)?;
        let mut total: Option<Tensor> = None;
        for rec in batch {
            let (tokens, mask) = pipeline::receiver_teacher_forced(&roles.receiver, rec)?;
            let mut patch = self.patch()?;
            let logits = apply_scoped(&ctx, &mut patch, |c| c.logits(&tokens))?;
            let l = task_loss(&logits, &tokens, &mask)?;
            total = Some(match total {
                Some(t) => (t + l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| TflowError::Input("empty batch".into()))?;
        Ok((total / batch.len() as f64)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticLoraReport {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub loss_trace: Vec<f64>,
    pub accuracy: AccuracyTable,
}

/// Trains a shared adapter with the same targets, rank, data, batch schedule and task
/// loss as the generator, then evaluates it with the receiver protocol.
pub fn static_lora_baseline(
    backbone: &Backbone,
    roles: &RoleSet,
    train: &[DatasetRecord],
    eval: &[DatasetRecord],
    gcfg: &GeneratorConfig,
    tcfg: &TrainConfig,
    decode: &DecodeParams,
) -> Result<(StaticLora, StaticLoraReport)> {
    backbone.require_frozen()?;
    if train.is_empty() {
        return Err(TflowError::Input("no training records".into()));
    }
    let model = StaticLora::init(backbone.config(), gcfg, tcfg.seed)?;
    let mut opt = AdamW::new(tcfg.optimizer.clone());
    let mut trace = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps as u64 {
        let idx = batch_indices(tcfg.seed, tcfg.batch_size, step, train.len());
        let batch: Vec<&DatasetRecord> = idx.iter().map(|&i| &train[i]).collect();
        let loss = model.loss(backbone, roles, &batch)?;
        let value = nn::scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(TflowError::Training(format!("non-finite static adapter loss at step {step}")));
        }
        let grads = collect_grads(&model.params, &loss.backward()?)?;
        opt.step(&model.params, &grads)?;
        trace.push(value);
        if (step + 1) % tcfg.log_every.max(1) as u64 == 0 {
            log::info!("static step {} loss {value:.4}", step + 1);
        }
    }
    let mut accuracy = AccuracyTable::default();
    let frozen = model.patch()?.detached();
    for rec in eval {
        let mut patch = frozen.clone();
        let (_, out, _) = pipeline::receiver_decode(backbone, roles, &rec.query, Some(&mut patch), decode)?;
        accuracy.add(&rec.source, exact_match(&crate::tokenizer::detokenize(&out), &rec.target));
    }
    let tail = &trace[trace.len().saturating_sub(100)..];
    let final_loss = (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64);
    Ok((model, StaticLoraReport { steps: tcfg.steps, final_loss, loss_trace: trace, accuracy }))
}

/// `C_bb(T)`: MACs of one frozen forward over `t` positions.
pub fn c_bb(cfg: &BackboneConfig, t: usize) -> u64 {
    forward_macs(cfg, t)
}

/// `C_inj`: low-rank branch MACs over `t` receiver positions for `n_senders` fused senders.
pub fn c_inj(cfg: &BackboneConfig, kinds: &[ModuleKind], n_senders: usize, rank: usize, t: usize) -> u64 {
    let per_layer: usize = kinds
        .iter()
        .map(|k| {
            let (d_in, d_out) = k.dims(cfg);
            d_in + d_out
        })
        .sum();
    (n_senders * t * rank * cfg.n_layers * per_layer) as u64
}

/// Four-term generator cost for one sender with `t` conditioning positions:
/// `N_pg·(S·L²·d + L·S²·d + L·S·T·d + L·S·d²)`.
pub fn c_gen_sender(gcfg: &GeneratorConfig, layout: &Layout, t: usize) -> u64 {
    let (s, l, d) = (layout.slots(), layout.n_layers, gcfg.d_pg);
    (gcfg.n_blocks * (s * l * l * d + l * s * s * d + l * s * t * d + l * s * d * d)) as u64
}

/// Counters observed while running the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasuredCosts {
    pub sender_macs: u64,
    pub injection_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDims {
    pub module: ModuleKind,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub n_agents: usize,
    pub sender_lengths: Vec<usize>,
    pub receiver_len: usize,
    pub rank: usize,
    pub n_layers: usize,
    pub n_modules: usize,
    pub slots: usize,
    pub d_pg: usize,
    pub n_blocks: usize,
    pub module_dims: Vec<ModuleDims>,
    pub c_bb_per_sender: Vec<u64>,
    pub c_sender: u64,
    pub c_gen_per_sender: Vec<u64>,
    pub c_gen: u64,
    /// Exact MACs of this generator implementation per sender, for reference.
    pub gen_exact_per_sender: Vec<u64>,
    pub c_inj: u64,
    pub c_extra: u64,
    pub measured: Option<MeasuredCosts>,
    pub sender_agrees: Option<bool>,
    pub injection_agrees: Option<bool>,
}

pub fn cost_report(
    bcfg: &BackboneConfig,
    gcfg: &GeneratorConfig,
    sender_lengths: &[usize],
    receiver_len: usize,
    measured: Option<MeasuredCosts>,
) -> Result<CostReport> {
    let layout = Layout::new(bcfg, gcfg)?;
    let c_bb_per_sender: Vec<u64> = sender_lengths.iter().map(|&t| c_bb(bcfg, t)).collect();
    let c_gen_per_sender: Vec<u64> = sender_lengths.iter().map(|&t| c_gen_sender(gcfg, &layout, t)).collect();
    let gen_exact_per_sender =
        sender_lengths.iter().map(|&t| crate::generator::generator_macs(gcfg, &layout, t, bcfg.d_model)).collect();
    let c_sender = c_bb_per_sender.iter().sum();
    let c_gen = c_gen_per_sender.iter().sum();
    let c_inj = c_inj(bcfg, &layout.kinds, sender_lengths.len(), gcfg.rank, receiver_len);
    Ok(CostReport {
        n_agents: sender_lengths.len() + 1,
        sender_lengths: sender_lengths.to_vec(),
        receiver_len,
        rank: gcfg.rank,
        n_layers: bcfg.n_layers,
        n_modules: layout.cols(),
        slots: layout.slots(),
        d_pg: gcfg.d_pg,
        n_blocks: gcfg.n_blocks,
        module_dims: layout
            .kinds
            .iter()
            .map(|&k| {
                let (d_in, d_out) = k.dims(bcfg);
                ModuleDims { module: k, d_in, d_out }
            })
            .collect(),
        c_bb_per_sender,
        c_sender,
        c_gen_per_sender,
        c_gen,
        gen_exact_per_sender,
        c_inj,
        c_extra: c_sender + c_gen + c_inj,
        measured,
        sender_agrees: measured.map(|m| m.sender_macs == c_sender),
        injection_agrees: measured.map(|m| m.injection_macs == c_inj),
    })
}

/// Cost report for one real query, with the counters observed while running it.
pub fn measured_cost_report(
    model: &TflowModel,
    backbone: &Backbone,
    roles: &RoleSet,
    rec: &DatasetRecord,
    mode: Mode,
    decode: &DecodeParams,
) -> Result<CostReport> {
    let res = pipeline::tflow_infer(&rec.query, &rec.context, roles, model, backbone, decode, mode)?;
    let senders: Vec<usize> = res
        .account
        .agents
        .iter()
        .filter(|a| a.kind == pipeline::RoleKind::Sender)
        .map(|a| a.prefill_tokens as usize)
        .collect();
    let (_, _, sender_counters) = pipeline::capture_senders_counted(backbone, roles, &rec.query, &rec.context, mode)?;
    let receiver_len = (res.counters.prefill_positions + res.counters.decode_positions) as usize
        - senders.iter().sum::<usize>();
    cost_report(
        backbone.config(),
        &model.gen.config,
        &senders,
        receiver_len,
        Some(MeasuredCosts { sender_macs: sender_counters.backbone_macs(), injection_macs: res.counters.lora_macs }),
    )
}

/// The static adapter's fingerprint, identical for every input.
pub fn static_fingerprint(model: &StaticLora) -> Result<Fingerprint> {
    Fingerprint::from_patch(&model.patch()?)
}

/// Layer-mixing weights of a trained model, as plain numbers.
pub fn layer_weights(model: &TflowModel) -> Result<Vec<f64>> {
    nn::to_f64_vec(&model.layer_weights()?)
}
