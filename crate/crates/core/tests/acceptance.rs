//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process exits non-zero
//! when any criterion fails.
//!
//! The expensive criteria share one full seed-7 run. It lives in `TFLOW_ACCEPTANCE_DIR`
//! (default: `<target>/tmp/acceptance-seed7`) and completed stages are reused when the
//! directory already holds a run of the same configuration.

use std::collections::BTreeMap;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use serde_json::Value;

use tflow_core::analysis::{self, Condition, MismatchReport, StaticLoraReport};
use tflow_core::backbone::{Backbone, BackboneConfig, BackboneWeights, DecodeParams, ExecContext, ModuleKind};
use tflow_core::checkpoint::Container;
use tflow_core::fusion::{self, apply_scoped, TransientPatch};
use tflow_core::generator::{GeneratorConfig, Layout, LoraFactorSet};
use tflow_core::nn;
use tflow_core::pipeline::{self, RolePrompt, RoleSet};
use tflow_core::tokenizer::{self, BOS};
use tflow_core::training::{self, DatasetRecord, Mode, TrainConfig, TrainState};
use tflow_core::workbench::experiment::{ResultRow, Summary};
use tflow_core::workbench::synthetic::{gen_records, SyntheticTaskSpec, TaskKind};
use tflow_core::workbench::{io, Protocol, Run, RunConfig, Stage};
use tflow_core::{Result, TflowError};

type Check = std::result::Result<String, String>;

fn fail<T>(msg: impl Into<String>) -> std::result::Result<T, String> {
    Err(msg.into())
}

fn req(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: TflowError) -> String {
    format!("error: {e}")
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    let a = nn::to_f64_vec(a).unwrap();
    let b = nn::to_f64_vec(b).unwrap();
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn frozen_backbone(cfg: BackboneConfig, seed: u64) -> Backbone {
    let mut b = Backbone::build(cfg, seed).unwrap();
    b.freeze().unwrap();
    b
}

fn small_config() -> BackboneConfig {
    BackboneConfig { d_model: 32, n_layers: 2, n_heads: 4, d_ffn: 64, max_seq: 128, ..Default::default() }
}

fn random_set(layout: &Layout, rng: &mut nn::Rng) -> LoraFactorSet {
    let pairs: Vec<(Tensor, Tensor)> = layout
        .specs
        .iter()
        .map(|s| {
            (
                nn::normal_tensor(rng, &[layout.rank, s.d_in], 0.3).unwrap(),
                nn::normal_tensor(rng, &[s.d_out, layout.rank], 0.3).unwrap(),
            )
        })
        .collect();
    LoraFactorSet::from_pairs(layout, &pairs).unwrap()
}

fn random_simplex(rng: &mut nn::Rng, n: usize) -> Vec<f32> {
    use rand::Rng;
    let raw: Vec<f32> = (0..n).map(|_| rng.random_range(0.1f32..1.0)).collect();
    let sum: f32 = raw.iter().sum();
    raw.iter().map(|x| x / sum).collect()
}

fn gamma(v: &[f32]) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

/// Nudges every `B`-producing weight away from zero so gradients reach the whole model.
fn perturb_b_head(state: &TrainState, std: f32, seed: u64) {
    let mut rng = nn::seeded_rng(seed);
    let (_, var) = state.params.iter().find(|(n, _)| n.as_str() == "gen.h_b").unwrap();
    let dims = var.as_tensor().dims().to_vec();
    let t = nn::normal_tensor(&mut rng, &dims, std).unwrap().to_dtype(state.dtype()).unwrap();
    state.set_param("gen.h_b", &t).unwrap();
}

fn mixed_queries(n: usize, seed: u64) -> Vec<DatasetRecord> {
    let mut out = Vec::new();
    for kind in TaskKind::ALL {
        let (train, _) = gen_records(&SyntheticTaskSpec::new(kind), seed).unwrap();
        out.extend(train.into_iter().take(n.div_ceil(3)));
    }
    out.truncate(n);
    out
}

// 1
fn zero_start_neutrality() -> Check {
    let backbone = frozen_backbone(BackboneConfig::default(), 11);
    let roles = RoleSet::new(&RoleSet::default_roles()).map_err(err)?;
    let state = TrainState::new(backbone.config(), &GeneratorConfig::default(), &TrainConfig::default()).map_err(err)?;
    let decode = DecodeParams::greedy(16);
    let queries = mixed_queries(100, 3);
    for rec in &queries {
        let t = pipeline::tflow_infer(&rec.query, &rec.context, &roles, &state.model, &backbone, &decode, Mode::Isolation)
            .map_err(err)?;
        let s = pipeline::single_infer(&rec.query, &roles.receiver, &backbone, &decode).map_err(err)?;
        req(t.answer == s.answer && t.receiver_tokens == s.receiver_tokens, || {
            format!("query `{}`: tflow `{}` vs single `{}`", rec.query, t.answer, s.answer)
        })?;
    }
    Ok(format!("{} queries bitwise identical", queries.len()))
}

fn patched_weights(backbone: &Backbone, patch: &TransientPatch) -> Result<Backbone> {
    let cfg = backbone.config().clone();
    let mut dense: BTreeMap<String, Tensor> = BTreeMap::new();
    for (l, kind) in patch.targets() {
        let w = backbone.weights().module(l, kind);
        let dw = patch.materialize_dense(l, kind)?;
        dense.insert(format!("layers.{l}.{}", kind.weight_path()), (w + dw)?);
    }
    let named: BTreeMap<String, Tensor> =
        backbone.weights().named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let weights = BackboneWeights::from_named(&cfg, |name| dense.get(name).or_else(|| named.get(name)).cloned())?;
    Backbone::from_weights(cfg, weights)
}

// 2
fn injection_correctness() -> Check {
    let backbone = frozen_backbone(small_config(), 5);
    let layout = Layout::new(backbone.config(), &GeneratorConfig { rank: 2, alpha: 4.0, ..Default::default() }).map_err(err)?;
    let mut rng = nn::seeded_rng(21);
    let ctx = ExecContext::new(&backbone).map_err(err)?;
    let tokens: Vec<u32> = std::iter::once(BOS).chain(tokenizer::tokenize("[solve] 18#5=")).collect();
    let (mut worst_logits, mut worst_branch) = (0.0f64, 0.0f64);
    for i in 0..50 {
        let n = 1 + i % 3;
        let sets: Vec<LoraFactorSet> = (0..n).map(|_| random_set(&layout, &mut rng)).collect();
        let g = random_simplex(&mut rng, n);
        let mut patch = fusion::fuse(&sets, &gamma(&g), 4.0, 2).map_err(err)?;
        let oracle = patched_weights(&backbone, &patch).map_err(err)?;
        let want = ExecContext::new(&oracle).and_then(|c| c.logits(&tokens)).map_err(err)?;
        let got = apply_scoped(&ctx, &mut patch.clone(), |c| c.logits(&tokens)).map_err(err)?;
        worst_logits = worst_logits.max(max_abs_diff(&got, &want));
        let x = nn::normal_tensor(&mut rng, &[9, 32], 1.0).unwrap();
        for (l, kind) in patch.targets() {
            let br = patch.branch(l, kind).map_err(err)?;
            if br.d_in() != 32 {
                continue;
            }
            let (y, _) = br.low_rank_apply(&x).map_err(err)?;
            let dense = nn::linear(&x, &br.dense().map_err(err)?).map_err(err)?;
            worst_branch = worst_branch.max(max_abs_diff(&y, &dense));
        }
        patch = patch.detached();
        drop(patch);
    }
    req(worst_logits <= 1e-4, || format!("logits max-abs {worst_logits:.3e} > 1e-4"))?;
    req(worst_branch <= 1e-5, || format!("low-rank branch max-abs {worst_branch:.3e} > 1e-5"))?;
    Ok(format!("logits max-abs {worst_logits:.2e}, branch max-abs {worst_branch:.2e} over 50 patches"))
}

// 3
fn transience() -> Check {
    let backbone = frozen_backbone(small_config(), 6);
    let before = backbone.frozen_hash().unwrap().to_string();
    let layout = Layout::new(backbone.config(), &GeneratorConfig { rank: 2, alpha: 4.0, ..Default::default() }).map_err(err)?;
    let mut rng = nn::seeded_rng(31);
    let ctx = ExecContext::new(&backbone).map_err(err)?;
    let prompt: Vec<u32> = std::iter::once(BOS).chain(tokenizer::tokenize("[solve] abc=")).collect();
    let decode = DecodeParams::greedy(8);
    let baseline = ctx.generate(&prompt, &decode).map_err(err)?;
    let patches: Vec<TransientPatch> = (0..8)
        .map(|_| {
            let s = random_set(&layout, &mut rng);
            fusion::fuse(std::slice::from_ref(&s), &gamma(&[1.0]), 4.0, 2).unwrap()
        })
        .collect();
    let (mut errors, mut panics) = (0, 0);
    for i in 0..1000 {
        let mut p = patches[i % patches.len()].clone();
        match i % 10 {
            3 => {
                let r: Result<()> = apply_scoped(&ctx, &mut p, |c| {
                    c.logits(&prompt)?;
                    Err(TflowError::Input("deliberate failure".into()))
                });
                req(r.is_err(), || "error path did not propagate".into())?;
                errors += 1;
            }
            7 => {
                let r = std::panic::catch_unwind(AssertUnwindSafe(|| {
                    let _ = apply_scoped(&ctx, &mut p, |c| -> Result<()> {
                        c.logits(&prompt)?;
                        panic!("deliberate panic");
                    });
                }));
                req(r.is_err(), || "panic path did not unwind".into())?;
                panics += 1;
            }
            _ => {
                apply_scoped(&ctx, &mut p, |c| c.logits(&prompt)).map_err(err)?;
            }
        }
        req(!ctx.has_patch(), || format!("patch still installed after cycle {i}"))?;
    }
    let after = backbone.weight_hash().map_err(err)?;
    req(after == before, || "backbone hash changed".into())?;
    let again = ctx.generate(&prompt, &decode).map_err(err)?;
    req(again == baseline, || "post-removal generation differs from baseline".into())?;
    Ok(format!("1000 cycles ({errors} error exits, {panics} panics); hash and greedy output unchanged"))
}

fn numerical_rank(t: &Tensor) -> usize {
    let (r, c) = t.dims2().unwrap();
    let v = nn::to_f64_vec(t).unwrap();
    let m = DMatrix::from_row_slice(r, c, &v);
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = (r.max(c) as f64) * max * f32::EPSILON as f64;
    sv.iter().filter(|&&s| s > tol).count()
}

// 4
fn fusion_algebra() -> Check {
    let cfg = BackboneConfig { d_model: 48, n_layers: 2, n_heads: 4, d_ffn: 96, ..Default::default() };
    let mut rng = nn::seeded_rng(41);
    let (mut worst_sum, mut worst_perm, mut max_rank_seen) = (0.0f64, 0.0f64, 0usize);
    for inst in 0..20 {
        let rank = 1 + inst % 3;
        let alpha = 2.0 * rank as f64;
        let n = 2 + inst % 3;
        let layout = Layout::new(&cfg, &GeneratorConfig { rank, alpha, ..Default::default() }).map_err(err)?;
        let sets: Vec<LoraFactorSet> = (0..n).map(|_| random_set(&layout, &mut rng)).collect();
        let g = random_simplex(&mut rng, n);
        let patch = fusion::fuse(&sets, &gamma(&g), alpha, rank).map_err(err)?;
        let perm: Vec<usize> = (0..n).rev().collect();
        let psets: Vec<LoraFactorSet> = perm.iter().map(|&i| sets[i].clone()).collect();
        let pg: Vec<f32> = perm.iter().map(|&i| g[i]).collect();
        let permuted = fusion::fuse(&psets, &gamma(&pg), alpha, rank).map_err(err)?;
        for (l, kind) in patch.targets() {
            let got = patch.materialize_dense(l, kind).map_err(err)?;
            let mut want: Option<Tensor> = None;
            for (s, &gi) in sets.iter().zip(&g) {
                let term = (s.b(l, kind).unwrap().matmul(&s.a(l, kind).unwrap()).unwrap() * (gi as f64 * alpha / rank as f64)).unwrap();
                want = Some(match want {
                    Some(w) => (w + term).unwrap(),
                    None => term,
                });
            }
            worst_sum = worst_sum.max(max_abs_diff(&got, &want.unwrap()));
            worst_perm = worst_perm.max(max_abs_diff(&got, &permuted.materialize_dense(l, kind).map_err(err)?));
            let rk = numerical_rank(&got);
            req(rk <= n * rank, || format!("instance {inst}: rank {rk} exceeds {} ({n} senders, r = {rank})", n * rank))?;
            max_rank_seen = max_rank_seen.max(rk);
        }
    }
    req(worst_sum <= 1e-5, || format!("fused vs dense oracle max-abs {worst_sum:.3e} > 1e-5"))?;
    req(worst_perm <= 1e-6, || format!("sender order changes the patch by {worst_perm:.3e} > 1e-6"))?;
    Ok(format!("oracle {worst_sum:.2e}, order {worst_perm:.2e}, ranks within bound on 20 instances"))
}

fn micro_setup(dtype: DType) -> (Backbone, TrainState, Vec<DatasetRecord>, RoleSet) {
    let bcfg = BackboneConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ffn: 24, max_seq: 64, ..Default::default() };
    let gcfg = GeneratorConfig {
        d_pg: 8,
        n_heads: 2,
        n_blocks: 1,
        rank: 2,
        alpha: 4.0,
        ffn_mult: 2,
        target_modules: vec![ModuleKind::Q, ModuleKind::V],
        init_std: 0.1,
        ..Default::default()
    };
    let backbone = frozen_backbone(bcfg.clone(), 2).with_dtype(dtype).unwrap();
    let tcfg = TrainConfig { lambda_div: 0.1, ..Default::default() };
    let mut state = TrainState::new(&bcfg, &gcfg, &tcfg).unwrap().to_dtype(dtype).unwrap();
    perturb_b_head(&state, 1.5, 9);
    let recs = vec![
        DatasetRecord { query: "7#2=".into(), context: "op=add".into(), target: "9".into(), source: "arith".into() },
        DatasetRecord { query: "ab=".into(), context: "op=rev".into(), target: "ba".into(), source: "strop".into() },
    ];
    // seed the diversity cache so its gradient is exercised too
    let refs: Vec<&DatasetRecord> = recs.iter().collect();
    let obj = training::objective(&state, &refs, &backbone, &roles_micro()).unwrap();
    let mut rng = nn::seeded_rng(12);
    for (src, v) in obj.updates {
        let noise = nn::normal_tensor(&mut rng, v.dims(), 0.01).unwrap().to_dtype(dtype).unwrap();
        state.cache.insert(src, (v + noise).unwrap());
    }
    (backbone, state, recs, roles_micro())
}

fn roles_micro() -> RoleSet {
    RoleSet::new(&[RolePrompt::sender("a", "[a] "), RolePrompt::sender("b", "[bb] "), RolePrompt::receiver("c", "[c] ")])
        .unwrap()
}

// 5
fn gradient_fidelity() -> Check {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (dtype, eps, tol) in [(DType::F32, 1e-3, 1e-2), (DType::F64, 1e-6, 1e-5)] {
        let (backbone, state, recs, roles) = micro_setup(dtype);
        let refs: Vec<&DatasetRecord> = recs.iter().collect();
        let rep = training::gradient_check(&state, &refs, &backbone, &roles, eps, tol, 12, 3).map_err(err)?;
        let bad: Vec<String> = rep
            .tensors
            .iter()
            .filter(|t| !t.passed)
            .map(|t| format!("{} ({:.2e}, |g| {:.1e})", t.name, t.rel_error, t.analytic_norm))
            .collect();
        if !bad.is_empty() {
            failures.push(format!("{dtype:?} loss {:.3} floor {:.1e}: {}", rep.loss, rep.noise_floor, bad.join(", ")));
        }
        let resolved = rep.tensors.iter().filter(|t| t.rel_error < tol).count();
        lines.push(format!(
            "{dtype:?} {resolved}/{} tensors within rel {tol:.0e}, rest within the {:.1e} noise floor",
            rep.tensors.len(),
            rep.noise_floor
        ));
    }
    req(failures.is_empty(), || failures.join("; "))?;
    Ok(lines.join("; "))
}

// 6
fn analytic_losses() -> Check {
    let logits = Tensor::zeros((3, 258), DType::F32, &Device::Cpu).unwrap();
    let ce = nn::scalar_f64(&training::task_loss(&logits, &[BOS, 65, 66], &[false, true, true]).map_err(err)?).unwrap();
    req((ce - 258f64.ln()).abs() <= 1e-3, || format!("uniform CE {ce} vs ln 258"))?;
    let mut rng = nn::seeded_rng(61);
    let v = nn::normal_tensor(&mut rng, &[200], 1.0).unwrap();
    let div = |c: &Tensor| nn::scalar_f64(&training::diversity_loss(&v, Some(c)).unwrap()).unwrap();
    let par = div(&(&v * 3.0).unwrap());
    let anti = div(&v.neg().unwrap());
    req((par - 1.0).abs() <= 1e-6 && (anti - 1.0).abs() <= 1e-6, || format!("parallel {par}, anti-parallel {anti}"))?;
    let vv = nn::to_f64_vec(&v).unwrap();
    let u = nn::to_f64_vec(&nn::normal_tensor(&mut rng, &[200], 1.0).unwrap()).unwrap();
    let dot: f64 = u.iter().zip(&vv).map(|(a, b)| a * b).sum();
    let nv: f64 = vv.iter().map(|x| x * x).sum();
    let orth: Vec<f32> = u.iter().zip(&vv).map(|(a, b)| (a - dot / nv * b) as f32).collect();
    let ortho = div(&Tensor::from_vec(orth, 200, &Device::Cpu).unwrap());
    req(ortho.abs() <= 1e-7, || format!("orthogonal cache gives {ortho:e}"))?;
    let (backbone, _, recs, roles) = micro_setup(DType::F32);
    let fresh = TrainState::new(
        backbone.config(),
        &GeneratorConfig { d_pg: 8, n_heads: 2, n_blocks: 1, rank: 2, alpha: 4.0, ffn_mult: 2, target_modules: vec![ModuleKind::Q, ModuleKind::V], ..Default::default() },
        &TrainConfig::default(),
    )
    .map_err(err)?;
    perturb_b_head(&fresh, 0.3, 5);
    let refs: Vec<&DatasetRecord> = recs.iter().collect();
    let first = training::objective(&fresh, &refs, &backbone, &roles).map_err(err)?;
    req(first.loss_div == 0.0, || format!("first encounter diversity {}", first.loss_div))?;
    Ok(format!("CE {ce:.6} (ln 258 = {:.6}); div 1/1/{ortho:.1e}; first encounter 0", 258f64.ln()))
}

fn run_dir() -> PathBuf {
    match std::env::var_os("TFLOW_ACCEPTANCE_DIR") {
        Some(p) => PathBuf::from(p),
        None => Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-seed7"),
    }
}

fn full_config() -> RunConfig {
    RunConfig { seed: 7, output_dir: run_dir(), ..Default::default() }
}

struct FullRun {
    run: Run,
    wall: f64,
}

fn full_run() -> std::result::Result<FullRun, String> {
    let t0 = Instant::now();
    let mut run = Run::open(&full_config(), true).map_err(err)?;
    for stage in Stage::ALL {
        run.run_stage(stage, true).map_err(err)?;
    }
    Ok(FullRun { run, wall: t0.elapsed().as_secs_f64() })
}

fn read<T: serde::de::DeserializeOwned>(run: &Run, rel: &str) -> std::result::Result<T, String> {
    io::read_json(&run.path(rel)).map_err(err)
}

fn per_source(table: &analysis::AccuracyTable) -> String {
    table.per_source.iter().map(|(s, a)| format!("{s} {:.0}%", 100.0 * a.accuracy)).collect::<Vec<_>>().join(" ")
}

// 7
fn desk_uplift(full: &FullRun) -> Check {
    let run = &full.run;
    let summary: Summary = read(run, "summary.json")?;
    let static_doc: Value = read(run, "analysis/static_lora.json")?;
    let stat: StaticLoraReport = serde_json::from_value(static_doc["report"].clone()).map_err(|e| e.to_string())?;
    let single = &summary.protocols[&Protocol::Single].accuracy;
    let tflow = &summary.protocols[&Protocol::Tflow].accuracy;
    let sources: Vec<&str> = TaskKind::ALL.iter().map(|k| k.name()).collect();
    let mut problems = Vec::new();
    for s in &sources {
        let a = |t: &analysis::AccuracyTable| t.source(s);
        if !(a(single) <= 0.60) {
            problems.push(format!("single {s} {:.1}% > 60%", 100.0 * a(single)));
        }
        if !(a(tflow) >= 0.90) {
            problems.push(format!("tflow {s} {:.1}% < 90%", 100.0 * a(tflow)));
        }
        if !(a(&stat.accuracy) <= 0.75) {
            problems.push(format!("static {s} {:.1}% > 75%", 100.0 * a(&stat.accuracy)));
        }
    }
    let cfg = &run.config;
    if cfg.train.steps > 2000 {
        problems.push(format!("{} generator steps > 2000", cfg.train.steps));
    }
    if cfg.train.mode != Mode::Isolation || cfg.seed != 7 {
        problems.push("not a channel-isolation seed-7 run".into());
    }
    let timings: BTreeMap<String, f64> = read(run, "timings.json")?;
    let total: f64 = ["pretrain", "train", "eval", "analyze"].iter().filter_map(|k| timings.get(*k)).sum();
    if total > 3600.0 {
        problems.push(format!("stage time {:.0} s > 60 min", total));
    }
    let detail = format!(
        "single [{}] tflow [{}] static [{}] in {:.1} min",
        per_source(single),
        per_source(tflow),
        per_source(&stat.accuracy),
        total / 60.0
    );
    if problems.is_empty() {
        Ok(detail)
    } else {
        fail(format!("{}; {detail}", problems.join(", ")))
    }
}

// 8
fn token_efficiency(full: &FullRun) -> Check {
    let rows: Vec<ResultRow> = io::read_jsonl(&full.run.path("results.jsonl")).map_err(err)?;
    let tflow: Vec<&ResultRow> = rows.iter().filter(|r| r.protocol == Protocol::Tflow).collect();
    let text: BTreeMap<(&str, &str), &ResultRow> = rows
        .iter()
        .filter(|r| r.protocol == Protocol::Textmas)
        .map(|r| ((r.source.as_str(), r.query.as_str()), r))
        .collect();
    req(!tflow.is_empty() && tflow.len() == text.len(), || "tflow and textmas rows do not pair up".into())?;
    let mut fewer = 0;
    for r in &tflow {
        let t = text.get(&(r.source.as_str(), r.query.as_str())).ok_or("unpaired query")?;
        if r.total_tokens < t.total_tokens {
            fewer += 1;
        }
        req(r.sender_generated_tokens == 0, || format!("tflow senders generated tokens on `{}`", r.query))?;
    }
    let frac = fewer as f64 / tflow.len() as f64;
    req(frac >= 0.99, || format!("tflow fewer tokens on {:.1}% of queries", 100.0 * frac))?;
    Ok(format!("tflow fewer tokens on {fewer}/{} queries; sender generation 0", tflow.len()))
}

fn to_f64_set(s: &LoraFactorSet) -> LoraFactorSet {
    let mut out = s.clone();
    for t in out.a.iter_mut().chain(out.b.iter_mut()) {
        *t = t.to_dtype(DType::F64).unwrap();
    }
    out
}

// 9
fn fingerprint_geometry(full: &FullRun) -> Check {
    let doc: Value = read(&full.run, "analysis/fingerprints.json")?;
    let margins: Vec<f64> = serde_json::from_value(doc["diagonal_margins"].clone()).map_err(|e| e.to_string())?;
    req(margins.len() == 3, || format!("{} sources in the fingerprint matrix", margins.len()))?;
    let worst = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    let margin_ok = worst >= 0.05;

    let mut gauge_worst = 0.0f64;
    let eval: Vec<DatasetRecord> = io::read_records(&full.run.path("data/eval.jsonl")).map_err(err)?;
    let backbone = io::load_backbone(&full.run.path("backbone.ckpt")).map_err(err)?;
    let state = TrainState::load(&full.run.path("state.ckpt")).map_err(err)?;
    let roles = full.run.roles.clone();
    let model = &state.model;
    let mut rng = nn::seeded_rng(91);
    let r = model.gen.config.rank;
    for rec in eval.iter().step_by(eval.len().div_ceil(10).max(1)).take(10) {
        let seqs: Vec<_> = roles.senders.iter().map(|role| pipeline::sender_tokens(role, rec, full.run.config.train.mode)).collect();
        let senders = training::capture_senders(&backbone, &seqs).map_err(err)?;
        let out = model.sender_outputs(&senders).map_err(err)?;
        let (_, g) = model.gate.scores_pooled(&out.pooled).map_err(err)?;
        let g = g.to_dtype(DType::F64).unwrap();
        let sets: Vec<LoraFactorSet> = (0..seqs.len()).map(|i| to_f64_set(&out.factors.instance(i).unwrap())).collect();
        let base = fusion::fuse(&sets, &g, model.gen.config.alpha, r).and_then(|p| p.flatten_dense()).map_err(err)?;
        let moved: Vec<LoraFactorSet> = sets
            .iter()
            .map(|s| {
                let noise = nn::normal_tensor(&mut rng, &[r, r], 0.5 / (r as f32).sqrt()).unwrap().to_dtype(DType::F64).unwrap();
                let gm = (Tensor::eye(r, DType::F64, &Device::Cpu).unwrap() + noise).unwrap();
                let gi = invert(&gm);
                s.reparameterize(&gm, &gi).unwrap()
            })
            .collect();
        let other = fusion::fuse(&moved, &g, model.gen.config.alpha, r).and_then(|p| p.flatten_dense()).map_err(err)?;
        gauge_worst = gauge_worst.max(max_abs_diff(&base, &other));
    }
    req(margin_ok, || format!("smallest diagonal margin {worst:.4} < 0.05 (margins {margins:?})"))?;
    req(gauge_worst <= 1e-5, || format!("gauge change moves the fingerprint by {gauge_worst:.3e}"))?;
    Ok(format!("diagonal margins {:?}, gauge max-abs {gauge_worst:.1e}", margins.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>()))
}

fn invert(g: &Tensor) -> Tensor {
    let r = g.dims()[0];
    let m = DMatrix::from_row_slice(r, r, &nn::to_f64_vec(g).unwrap());
    let inv = m.try_inverse().expect("invertible gauge");
    let flat: Vec<f64> = (0..r).flat_map(|i| (0..r).map(move |j| (i, j))).map(|(i, j)| inv[(i, j)]).collect();
    Tensor::from_vec(flat, (r, r), &Device::Cpu).unwrap()
}

// 10
fn mismatch_ordering(full: &FullRun) -> Check {
    let rep: MismatchReport = read(&full.run, "analysis/mismatch.json")?;
    let acc = |c: Condition| rep.conditions.get(&c).map(|t| t.overall.accuracy).unwrap_or(f64::NAN);
    let matched = acc(Condition::Matched);
    let others = [Condition::SameSource, Condition::CrossSource, Condition::Random];
    let zero = rep.zero_patch.overall.accuracy;
    let random = acc(Condition::Random);
    let detail = format!(
        "matched {:.1}% same {:.1}% cross {:.1}% random {:.1}% zero-patch {:.1}%",
        100.0 * matched,
        100.0 * acc(Condition::SameSource),
        100.0 * acc(Condition::CrossSource),
        100.0 * random,
        100.0 * zero
    );
    req(others.iter().all(|&c| matched > acc(c)), || format!("matched is not strictly highest: {detail}"))?;
    req((random - zero).abs() <= 0.10, || format!("random is more than 10 points from zero-patch: {detail}"))?;
    Ok(detail)
}

// 11
fn cost_agreement() -> Check {
    let kinds_all = ModuleKind::ALL.to_vec();
    let configs: Vec<(BackboneConfig, GeneratorConfig, usize)> = (0..10)
        .map(|i| {
            let d = [16, 24, 32][i % 3];
            let bcfg = BackboneConfig { d_model: d, n_layers: 1 + i % 3, n_heads: 2, d_ffn: 2 * d + 8 * (i % 2), max_seq: 128, ..Default::default() };
            let kinds = match i % 4 {
                0 => kinds_all.clone(),
                1 => vec![ModuleKind::Q, ModuleKind::V],
                2 => vec![ModuleKind::Up, ModuleKind::Down],
                _ => vec![ModuleKind::O, ModuleKind::Gate, ModuleKind::K],
            };
            let gcfg = GeneratorConfig { d_pg: 8, n_heads: 2, n_blocks: 1, rank: 1 + i % 4, alpha: 4.0, ffn_mult: 2, target_modules: kinds, ..Default::default() };
            (bcfg, gcfg, 1 + i % 3)
        })
        .collect();
    let rec = DatasetRecord { query: "12#3=".into(), context: "op=sub".into(), target: "9".into(), source: "arith".into() };
    for (i, (bcfg, gcfg, n)) in configs.iter().enumerate() {
        let backbone = frozen_backbone(bcfg.clone(), 100 + i as u64);
        let mut roles: Vec<RolePrompt> = (0..*n).map(|j| RolePrompt::sender(&format!("s{j}"), &format!("[s{j}] "))).collect();
        roles.push(RolePrompt::receiver("r", "[r] "));
        let roles = RoleSet::new(&roles).map_err(err)?;
        let state = TrainState::new(bcfg, gcfg, &TrainConfig::default()).map_err(err)?;
        perturb_b_head(&state, 0.1, i as u64);
        let rep = analysis::measured_cost_report(&state.model, &backbone, &roles, &rec, Mode::Isolation, &DecodeParams::greedy(4))
            .map_err(err)?;
        let m = rep.measured.unwrap();
        req(rep.injection_agrees == Some(true), || format!("config {i}: C_inj {} vs measured {}", rep.c_inj, m.injection_macs))?;
        req(rep.sender_agrees == Some(true), || format!("config {i}: C_sender {} vs measured {}", rep.c_sender, m.sender_macs))?;
        let one = analysis::cost_report(bcfg, gcfg, &[9], 14, None).map_err(err)?;
        for k in 1..=4usize {
            let many = analysis::cost_report(bcfg, gcfg, &vec![9; k], 14, None).map_err(err)?;
            req(many.c_sender == k as u64 * one.c_sender && many.c_inj == k as u64 * one.c_inj, || {
                format!("config {i}: costs not linear in the sender count at {k}")
            })?;
        }
    }
    Ok("analytic C_inj and C_sender equal the counters on 10 configurations; both linear in N-1".into())
}

fn tiny_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 3,
        output_dir: dir.to_path_buf(),
        backbone: BackboneConfig { d_model: 32, n_layers: 2, n_heads: 4, d_ffn: 64, ..Default::default() },
        generator: GeneratorConfig { d_pg: 16, n_heads: 2, n_blocks: 1, rank: 2, alpha: 4.0, ..Default::default() },
        ..Default::default()
    };
    cfg.pretrain.steps = 30;
    cfg.pretrain.batch_size = 8;
    cfg.train.steps = 12;
    cfg.train.batch_size = 2;
    cfg.checkpoint_every = 5;
    cfg.analysis.records_per_source = 3;
    cfg.eval.max_new = 6;
    cfg.eval.textmas_max_new = 6;
    for t in &mut cfg.data.tasks {
        t.n_train = 20;
        t.n_eval = 50;
        t.n_pretrain_queries = 30;
        t.pretrain_repeat = 1;
    }
    cfg
}

fn reproducible_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
            if rel == "timings.json" {
                continue;
            }
            out.insert(rel, std::fs::read(&p).unwrap());
        }
    }
    out
}

// 12
fn reproducibility() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let dir = root.path().join(name);
        tflow_core::workbench::run_experiment(&tiny_config(&dir), false).map_err(err)?;
        trees.push(reproducible_files(&dir));
    }
    let (a, b) = (&trees[0], &trees[1]);
    req(a.keys().eq(b.keys()), || "the two runs wrote different files".into())?;
    let differing: Vec<&String> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k).collect();
    req(differing.is_empty(), || format!("files differ: {differing:?}"))?;

    let dir = root.path().join("a");
    let state = TrainState::load(&dir.join("state.ckpt")).map_err(err)?;
    let copy = root.path().join("copy.ckpt");
    state.save(&copy, None).map_err(err)?;
    let back = TrainState::load(&copy).map_err(err)?;
    for ((n1, t1), (n2, t2)) in state.model.named().iter().zip(back.model.named().iter()) {
        req(n1 == n2 && nn::to_f64_vec(t1).unwrap() == nn::to_f64_vec(t2).unwrap(), || format!("tensor {n1} changed"))?;
    }
    let again = root.path().join("again.ckpt");
    back.save(&again, None).map_err(err)?;
    req(std::fs::read(&copy).unwrap() == std::fs::read(&again).unwrap(), || "checkpoint bytes changed on reload".into())?;
    let c = Container::load(&copy).map_err(err)?;
    req(c.tensors.len() == state.params.iter().count() || !c.tensors.is_empty(), || "empty checkpoint".into())?;
    Ok(format!("{} artifacts byte-identical across two runs; checkpoint round trip bitwise", a.len()))
}

fn main() {
    // accept and ignore harness flags such as --nocapture
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let light: Vec<(u32, &str, fn() -> Check)> = vec![
        (1, "zero-start neutrality", zero_start_neutrality),
        (2, "injection correctness", injection_correctness),
        (3, "transience", transience),
        (4, "fusion algebra", fusion_algebra),
        (5, "gradient fidelity", gradient_fidelity),
        (6, "analytic loss values", analytic_losses),
        (11, "cost-model agreement", cost_agreement),
        (12, "reproducibility", reproducibility),
    ];
    let heavy: Vec<(u32, &str, fn(&FullRun) -> Check)> = vec![
        (7, "desk-scale uplift", desk_uplift),
        (8, "token-efficiency direction", token_efficiency),
        (9, "fingerprint geometry", fingerprint_geometry),
        (10, "mismatch ablation ordering", mismatch_ordering),
    ];
    let wanted = |id: u32| filter.as_ref().is_none_or(|f| f == &id.to_string() || f == "all");
    let mut results: Vec<(u32, String, bool, String, f64)> = Vec::new();
    let run_one = |f: &dyn Fn() -> Check| -> (bool, String) {
        match std::panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(d)) => (true, d),
            Ok(Err(d)) => (false, d),
            Err(p) => (false, format!("panicked: {:?}", p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied()))),
        }
    };
    for (id, name, f) in &light {
        if wanted(*id) {
            let t0 = Instant::now();
            let (ok, d) = run_one(&|| f());
            results.push((*id, name.to_string(), ok, d, t0.elapsed().as_secs_f64()));
        }
    }
    if heavy.iter().any(|(id, _, _)| wanted(*id)) {
        let t0 = Instant::now();
        let full = std::panic::catch_unwind(full_run).unwrap_or_else(|_| Err("full run panicked".into()));
        eprintln!("full run ready after {:.0} s", t0.elapsed().as_secs_f64());
        for (id, name, f) in &heavy {
            if !wanted(*id) {
                continue;
            }
            let t1 = Instant::now();
            let (ok, d) = match &full {
                Ok(full) => run_one(&|| f(full)),
                Err(e) => (false, format!("full run failed: {e}")),
            };
            results.push((*id, name.to_string(), ok, d, t1.elapsed().as_secs_f64()));
        }
        if let Ok(full) = &full {
            eprintln!("full run directory {} ({:.0} s this invocation)", full.run.out.display(), full.wall);
        }
    }
    results.sort_by_key(|r| r.0);
    println!();
    for (id, name, ok, detail, secs) in &results {
        println!("criterion {id:>2} {:<28} {} ({secs:.1} s) {detail}", name, if *ok { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.2).count();
    println!("\nacceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
