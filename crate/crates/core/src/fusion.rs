//! Gate-weighted fusion of per-sender factors into one transient patch, and its scoped
//! application to an execution context as an additive low-rank branch.

use std::collections::BTreeMap;

use candle_core::{Tensor, D};

use crate::backbone::{Counters, ExecContext, ModuleKind};
use crate::error::{Result, TflowError};
use crate::generator::{FactorBatch, LoraFactorSet};
use crate::nn;

const SIMPLEX_TOL: f64 = 1e-4;

/// Scalar score head over mean-pooled raw conditioning.
#[derive(Debug, Clone)]
pub struct FusionGate {
    /// `[d_model]`
    pub w: Tensor,
    /// `[1]`
    pub b: Tensor,
}

impl FusionGate {
    /// Scores and softmax weights for pooled signals `[n, d_model]`.
    pub fn scores_pooled(&self, pooled: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = pooled.dim(0)?;
        if n == 0 {
            return Err(TflowError::Input("the gate needs at least one sender".into()));
        }
        let d = self.w.dim(0)?;
        let s = pooled.matmul(&self.w.reshape((d, 1))?)?.reshape(n)?.broadcast_add(&self.b)?;
        let gamma = nn::softmax_last(&s)?;
        Ok((s, gamma))
    }

    /// Scores and weights for raw signals, each `[T_i, d_model]`.
    pub fn scores(&self, raws: &[Tensor]) -> Result<(Tensor, Tensor)> {
        if raws.is_empty() {
            return Err(TflowError::Input("the gate needs at least one sender".into()));
        }
        let pooled = raws.iter().map(|c| c.mean(0)).collect::<std::result::Result<Vec<_>, _>>()?;
        self.scores_pooled(&Tensor::stack(&pooled, 0)?)
    }
}

/// Mean over valid positions of a padded batch `c [G, T, d]`.
pub fn masked_mean(c: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let (g, t, _) = c.dims3()?;
    let mut w = vec![0f32; g * t];
    for (i, &len) in lengths.iter().enumerate() {
        for j in 0..len {
            w[i * t + j] = 1.0 / len as f32;
        }
    }
    let w = Tensor::from_vec(w, (g, 1, t), c.device())?.to_dtype(c.dtype())?;
    Ok(w.matmul(c)?.squeeze(1)?)
}

/// The low-rank branch of one module: `x ↦ (x·Aᵀ)·Bᵀ` with blocks already scaled by
/// `γ_i·α/r`. `a [k, d_in]`, `b [d_out, k]`, `k = (N−1)·r`.
#[derive(Debug, Clone)]
pub struct LowRankBranch {
    pub a: Tensor,
    pub b: Tensor,
}

impl LowRankBranch {
    pub fn d_in(&self) -> usize {
        self.a.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.dims()[0]
    }

    pub fn inner(&self) -> usize {
        self.a.dims()[0]
    }

    pub(crate) fn apply(&self, x: &Tensor, counters: Option<&Counters>) -> Result<Tensor> {
        let d_in = x.dim(D::Minus1)?;
        if d_in != self.d_in() {
            return Err(TflowError::Shape(format!("branch expects width {}, got {d_in}", self.d_in())));
        }
        let y = nn::linear(&nn::linear(x, &self.a)?, &self.b)?;
        if let Some(c) = counters {
            let rows = x.elem_count() / d_in;
            c.add_lora_macs(rows * self.inner() * (self.d_in() + self.d_out()));
        }
        Ok(y)
    }

    /// `(x·Aᵀ)·Bᵀ` for `x [T, d_in]`, with the MACs it cost.
    pub fn low_rank_apply(&self, x: &Tensor) -> Result<(Tensor, u64)> {
        let counters = Counters::default();
        let y = self.apply(x, Some(&counters))?;
        Ok((y, counters.snapshot().lora_macs))
    }

    /// Dense `B·A`, `[d_out, d_in]`.
    pub fn dense(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?)
    }
}

/// Branch map installed in an execution context while a patch is applied.
#[derive(Debug, Clone, Default)]
pub struct AppliedPatch {
    branches: BTreeMap<(usize, ModuleKind), LowRankBranch>,
}

impl AppliedPatch {
    pub fn branch(&self, layer: usize, kind: ModuleKind) -> Option<&LowRankBranch> {
        self.branches.get(&(layer, kind))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchState {
    Created,
    Applied,
    Removed,
}

/// Fused per-query update `ΔW = (α/r) Σ_i γ_i B_i A_i` for every target, in low-rank form.
#[derive(Debug, Clone)]
pub struct TransientPatch {
    pub kinds: Vec<ModuleKind>,
    pub n_layers: usize,
    pub rank: usize,
    pub n_senders: usize,
    pub scale: f64,
    /// `[n_senders]`
    pub gamma: Tensor,
    /// `a_cat[m]` is `[L, k, d_in]`.
    a_cat: Vec<Tensor>,
    /// `b_cat[m]` is `[L, d_out, k]` with γ and scale folded in.
    b_cat: Vec<Tensor>,
    state: PatchState,
}

fn check_simplex(gamma: &Tensor, n: usize) -> Result<()> {
    let g = nn::to_f64_vec(gamma)?;
    if g.len() != n {
        return Err(TflowError::Config(format!("{} gate weights for {n} senders", g.len())));
    }
    let sum: f64 = g.iter().sum();
    if g.iter().any(|&x| !(x >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(TflowError::Invariant(format!("gate weights {g:?} are off the simplex")));
    }
    Ok(())
}

/// Fuses factor sets covering identical targets.
pub fn fuse(sets: &[LoraFactorSet], gamma: &Tensor, alpha: f64, rank: usize) -> Result<TransientPatch> {
    if sets.is_empty() {
        return Err(TflowError::Input("nothing to fuse".into()));
    }
    fuse_batch(&FactorBatch::stack(sets)?, gamma, alpha, rank)
}

/// Fuses the instances of a batch (one per sender).
pub fn fuse_batch(batch: &FactorBatch, gamma: &Tensor, alpha: f64, rank: usize) -> Result<TransientPatch> {
    let n = batch.batch_size()?;
    check_simplex(gamma, n)?;
    if rank != batch.rank {
        return Err(TflowError::Config(format!("rank {rank} does not match factor rank {}", batch.rank)));
    }
    let scale = alpha / rank as f64;
    let l = batch.n_layers;
    let weights = (gamma * scale)?.reshape((n, 1, 1, 1))?;
    let mut a_cat = Vec::with_capacity(batch.kinds.len());
    let mut b_cat = Vec::with_capacity(batch.kinds.len());
    for (a, b) in batch.a.iter().zip(&batch.b) {
        let (_, _, r, d_in) = a.dims4()?;
        let d_out = b.dim(2)?;
        a_cat.push(a.transpose(0, 1)?.contiguous()?.reshape((l, n * r, d_in))?);
        let scaled = b.broadcast_mul(&weights)?;
        b_cat.push(scaled.permute((1, 2, 0, 3))?.contiguous()?.reshape((l, d_out, n * r))?);
    }
    Ok(TransientPatch {
        kinds: batch.kinds.clone(),
        n_layers: l,
        rank,
        n_senders: n,
        scale,
        gamma: gamma.clone(),
        a_cat,
        b_cat,
        state: PatchState::Created,
    })
}

impl TransientPatch {
    pub fn state(&self) -> PatchState {
        self.state
    }

    fn column(&self, kind: ModuleKind) -> Result<usize> {
        self.kinds
            .iter()
            .position(|&k| k == kind)
            .ok_or_else(|| TflowError::Config(format!("module {kind} is not targeted")))
    }

    pub fn branch(&self, layer: usize, kind: ModuleKind) -> Result<LowRankBranch> {
        let m = self.column(kind)?;
        Ok(LowRankBranch { a: self.a_cat[m].get(layer)?, b: self.b_cat[m].get(layer)? })
    }

    pub fn targets(&self) -> Vec<(usize, ModuleKind)> {
        (0..self.n_layers).flat_map(|l| self.kinds.iter().map(move |&k| (l, k))).collect()
    }

    /// Dense `ΔW` of one module, `[d_out, d_in]`.
    pub fn materialize_dense(&self, layer: usize, kind: ModuleKind) -> Result<Tensor> {
        self.branch(layer, kind)?.dense()
    }

    /// Every dense module update flattened row-major and concatenated in
    /// `(layer, module)` order.
    pub fn flatten_dense(&self) -> Result<Tensor> {
        let dense: Vec<Tensor> =
            self.a_cat.iter().zip(&self.b_cat).map(|(a, b)| b.matmul(a)).collect::<std::result::Result<_, _>>()?;
        let mut parts = Vec::with_capacity(self.n_layers * self.kinds.len());
        for l in 0..self.n_layers {
            for d in &dense {
                parts.push(d.get(l)?.flatten_all()?);
            }
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Multiply-accumulates of the low-rank branches over `t` positions.
    pub fn injection_macs(&self, t: usize) -> u64 {
        let k = self.n_senders * self.rank;
        self.a_cat
            .iter()
            .zip(&self.b_cat)
            .map(|(a, b)| (self.n_layers * t * k * (a.dims()[2] + b.dims()[1])) as u64)
            .sum()
    }

    fn applied(&self) -> Result<AppliedPatch> {
        let mut branches = BTreeMap::new();
        for (l, kind) in self.targets() {
            branches.insert((l, kind), self.branch(l, kind)?);
        }
        Ok(AppliedPatch { branches })
    }

    /// Copy with every tensor detached from the autograd graph, state reset to created.
    pub fn detached(&self) -> Self {
        let mut out = self.clone();
        for t in out.a_cat.iter_mut().chain(out.b_cat.iter_mut()) {
            *t = t.detach();
        }
        out.gamma = out.gamma.detach();
        out.state = PatchState::Created;
        out
    }
}

struct Scope<'c, 'a> {
    ctx: &'c ExecContext<'a>,
    state: &'c mut PatchState,
}

impl Drop for Scope<'_, '_> {
    fn drop(&mut self) {
        self.ctx.patch.borrow_mut().take();
        *self.state = PatchState::Removed;
    }
}

/// Runs `body` with `patch` applied to `ctx`; the patch is removed when `body` returns,
/// fails or panics.
pub fn apply_scoped<R>(
    ctx: &ExecContext<'_>,
    patch: &mut TransientPatch,
    body: impl FnOnce(&ExecContext<'_>) -> Result<R>,
) -> Result<R> {
    match patch.state {
        PatchState::Created => {}
        PatchState::Applied => return Err(TflowError::Lifecycle("patch is already applied".into())),
        PatchState::Removed => return Err(TflowError::Lifecycle("a removed patch cannot be re-applied".into())),
    }
    if ctx.has_patch() {
        return Err(TflowError::Lifecycle("execution context already holds a patch".into()));
    }
    let cfg = ctx.backbone().config();
    if patch.n_layers != cfg.n_layers {
        return Err(TflowError::Shape(format!(
            "patch covers {} layers, backbone has {}",
            patch.n_layers, cfg.n_layers
        )));
    }
    for (l, kind) in patch.targets() {
        let br = patch.branch(l, kind)?;
        if (br.d_in(), br.d_out()) != kind.dims(cfg) {
            return Err(TflowError::Shape(format!("patch for layer {l} {kind} has the wrong shape")));
        }
    }
    let applied = patch.applied()?;
    *ctx.patch.borrow_mut() = Some(applied);
    patch.state = PatchState::Applied;
    let _scope = Scope { ctx, state: &mut patch.state };
    body(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig, DecodeParams};
    use crate::generator::{GeneratorConfig, Layout};
    use crate::tokenizer::BOS;
    use candle_core::Device;

    fn small_backbone() -> Backbone {
        let cfg = BackboneConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ffn: 24, max_seq: 64, ..Default::default() };
        let mut b = Backbone::build(cfg, 3).unwrap();
        b.freeze().unwrap();
        b
    }

    fn random_set(layout: &Layout, rng: &mut nn::Rng, b_std: f32) -> LoraFactorSet {
        let pairs: Vec<(Tensor, Tensor)> = layout
            .specs
            .iter()
            .map(|s| {
                (
                    nn::normal_tensor(rng, &[layout.rank, s.d_in], 0.3).unwrap(),
                    nn::normal_tensor(rng, &[s.d_out, layout.rank], b_std).unwrap(),
                )
            })
            .collect();
        LoraFactorSet::from_pairs(layout, &pairs).unwrap()
    }

    fn gamma(v: &[f32]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn layout_for(b: &Backbone) -> Layout {
        Layout::new(b.config(), &GeneratorConfig { rank: 2, alpha: 4.0, ..Default::default() }).unwrap()
    }

    #[test]
    fn gate_cases() {
        let gate = FusionGate { w: Tensor::new(&[0.3f32, -0.2], &Device::Cpu).unwrap(), b: gamma(&[0.1]) };
        let c = Tensor::new(&[[1.0f32, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap();
        let (_, g) = gate.scores(&[c.clone(), c.clone()]).unwrap();
        assert_eq!(g.to_vec1::<f32>().unwrap(), vec![0.5, 0.5]);
        let (_, g) = gate.scores(&[c]).unwrap();
        assert_eq!(g.to_vec1::<f32>().unwrap(), vec![1.0]);
        assert!(matches!(gate.scores(&[]), Err(TflowError::Input(_))));
        let s = Tensor::new(&[2f64.ln(), 0.0], &Device::Cpu).unwrap();
        let g = nn::to_f64_vec(&nn::softmax_last(&s).unwrap()).unwrap();
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-9 && (g[1] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn single_sender_scale_is_alpha_over_r() {
        let b = small_backbone();
        let layout = Layout::new(b.config(), &GeneratorConfig::default()).unwrap();
        let mut rng = nn::seeded_rng(1);
        let set = random_set(&layout, &mut rng, 0.3);
        let p = fuse(std::slice::from_ref(&set), &gamma(&[1.0]), 8.0, 4).unwrap();
        for (l, k) in p.targets() {
            let want = (set.b(l, k).unwrap().matmul(&set.a(l, k).unwrap()).unwrap() * 2.0).unwrap();
            let got = p.materialize_dense(l, k).unwrap();
            let diff = nn::to_f32_vec(&(got - want).unwrap()).unwrap().iter().fold(0f32, |m, x| m.max(x.abs()));
            assert!(diff < 1e-6);
        }
    }

    #[test]
    fn off_simplex_and_mismatch_rejected() {
        let b = small_backbone();
        let layout = layout_for(&b);
        let mut rng = nn::seeded_rng(2);
        let s1 = random_set(&layout, &mut rng, 0.3);
        let s2 = random_set(&layout, &mut rng, 0.3);
        assert!(matches!(fuse(&[s1.clone(), s2.clone()], &gamma(&[0.7, 0.7]), 4.0, 2), Err(TflowError::Invariant(_))));
        let other = Layout::new(b.config(), &GeneratorConfig { rank: 2, target_modules: vec![ModuleKind::Q], ..Default::default() }).unwrap();
        let s3 = random_set(&other, &mut rng, 0.3);
        assert!(matches!(fuse(&[s1, s3], &gamma(&[0.5, 0.5]), 4.0, 2), Err(TflowError::Config(_))));
    }

    #[test]
    fn patch_lifecycle() {
        let b = small_backbone();
        let layout = layout_for(&b);
        let mut rng = nn::seeded_rng(3);
        let set = random_set(&layout, &mut rng, 0.3);
        let ctx = ExecContext::new(&b).unwrap();
        let mut p = fuse(std::slice::from_ref(&set), &gamma(&[1.0]), 4.0, 2).unwrap();
        let mut inner = p.clone();
        let nested = apply_scoped(&ctx, &mut p, |c| apply_scoped(c, &mut inner, |_| Ok(())));
        assert!(matches!(nested, Err(TflowError::Lifecycle(_))));
        assert_eq!(p.state(), PatchState::Removed);
        assert!(!ctx.has_patch());
        assert!(matches!(apply_scoped(&ctx, &mut p, |_| Ok(())), Err(TflowError::Lifecycle(_))));
    }

    #[test]
    fn error_path_removes_patch() {
        let b = small_backbone();
        let layout = layout_for(&b);
        let mut rng = nn::seeded_rng(4);
        let set = random_set(&layout, &mut rng, 0.5);
        let ctx = ExecContext::new(&b).unwrap();
        let prompt = [BOS, 40, 41, 42];
        let base = ctx.generate(&prompt, &DecodeParams::greedy(8)).unwrap();
        let mut p = fuse(std::slice::from_ref(&set), &gamma(&[1.0]), 4.0, 2).unwrap();
        let r: Result<()> = apply_scoped(&ctx, &mut p, |c| {
            c.logits(&prompt)?;
            Err(TflowError::Input("boom".into()))
        });
        assert!(r.is_err());
        assert!(!ctx.has_patch());
        assert_eq!(ctx.generate(&prompt, &DecodeParams::greedy(8)).unwrap(), base);
    }

    #[test]
    fn zero_patch_is_neutral() {
        let b = small_backbone();
        let layout = layout_for(&b);
        let mut rng = nn::seeded_rng(5);
        let set = random_set(&layout, &mut rng, 0.0);
        let ctx = ExecContext::new(&b).unwrap();
        let prompt = [BOS, 1, 2, 3];
        let base = nn::to_f32_vec(&ctx.logits(&prompt).unwrap()).unwrap();
        let mut p = fuse(&[set.clone(), set], &gamma(&[0.5, 0.5]), 4.0, 2).unwrap();
        assert!(nn::to_f32_vec(&p.flatten_dense().unwrap()).unwrap().iter().all(|&x| x == 0.0));
        let patched = apply_scoped(&ctx, &mut p, |c| c.logits(&prompt)).unwrap();
        assert_eq!(nn::to_f32_vec(&patched).unwrap(), base);
    }

    #[test]
    fn low_rank_matches_dense_and_counts_macs() {
        let b = small_backbone();
        let layout = layout_for(&b);
        let mut rng = nn::seeded_rng(6);
        let s1 = random_set(&layout, &mut rng, 0.3);
        let s2 = random_set(&layout, &mut rng, 0.3);
        let p = fuse(&[s1, s2], &gamma(&[0.25, 0.75]), 4.0, 2).unwrap();
        let x = nn::normal_tensor(&mut rng, &[7, 24], 1.0).unwrap();
        let br = p.branch(1, ModuleKind::Down).unwrap();
        let (y, macs) = br.low_rank_apply(&x).unwrap();
        let dense = nn::linear(&x, &p.materialize_dense(1, ModuleKind::Down).unwrap()).unwrap();
        let diff = nn::to_f32_vec(&(y - dense).unwrap()).unwrap().iter().fold(0f32, |m, v| m.max(v.abs()));
        assert!(diff < 1e-5);
        assert_eq!(macs, (7 * 4 * (24 + 16)) as u64);
        let wrong = nn::normal_tensor(&mut rng, &[7, 16], 1.0).unwrap();
        assert!(matches!(br.low_rank_apply(&wrong), Err(TflowError::Shape(_))));
    }

    #[test]
    fn masked_mean_ignores_padding() {
        let c = Tensor::new(&[[[1.0f32], [3.0], [100.0]], [[2.0], [4.0], [6.0]]], &Device::Cpu).unwrap();
        let m = masked_mean(&c, &[2, 3]).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(m, vec![vec![2.0], vec![4.0]]);
    }
}
