//! The parameter generator: a learnable token grid, cross-attended to the sender
//! conditioning, refined by multi-axis transformer blocks and read out as LoRA factors.
//!
//! The grid has `L` layer rows and `S = H·W` slots per layer, with `H = 2r` rank rows
//! (the first `r` feed `A`, the rest feed `B`) and `W = M` module columns. Slot index of
//! rank row `h` and module column `m` is `h·W + m`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ModuleKind, ModuleSpec};
use crate::error::{Result, TflowError};
use crate::nn::{self, AttnProj, Rope};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub d_pg: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub rank: usize,
    pub alpha: f64,
    pub chunk_factor: usize,
    pub rope_base: f64,
    pub ffn_mult: usize,
    pub init_std: f32,
    pub target_modules: Vec<ModuleKind>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d_pg: 64,
            n_heads: 4,
            n_blocks: 2,
            rank: 4,
            alpha: 8.0,
            chunk_factor: 1,
            rope_base: 10000.0,
            ffn_mult: 4,
            init_std: 0.005,
            target_modules: ModuleKind::ALL.to_vec(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_factor > 1 {
            return Err(TflowError::NotImplemented(format!(
                "chunked detokenization (chunk_factor = {}) is not supported; use 1",
                self.chunk_factor
            )));
        }
        if self.chunk_factor == 0 {
            return Err(TflowError::Config("chunk_factor must be 1".into()));
        }
        for (name, v) in [("d_pg", self.d_pg), ("n_heads", self.n_heads), ("rank", self.rank), ("ffn_mult", self.ffn_mult)] {
            if v == 0 {
                return Err(TflowError::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_pg.is_multiple_of(self.n_heads) || !(self.d_pg / self.n_heads).is_multiple_of(2) {
            return Err(TflowError::Config(format!(
                "d_pg {} must split into an even head dimension over {} heads",
                self.d_pg, self.n_heads
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(TflowError::Config("alpha must be positive".into()));
        }
        if !(self.rope_base > 0.0) {
            return Err(TflowError::Config("rope_base must be positive".into()));
        }
        if self.target_modules.is_empty() {
            return Err(TflowError::Config("target_modules is empty".into()));
        }
        let mut seen = self.target_modules.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.target_modules.len() {
            return Err(TflowError::Config("target_modules has duplicates".into()));
        }
        Ok(())
    }

    /// LoRA scale `α / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn head_dim(&self) -> usize {
        self.d_pg / self.n_heads
    }
}

/// Geometry shared by the generator and everything that consumes its factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub n_layers: usize,
    pub kinds: Vec<ModuleKind>,
    pub rank: usize,
    pub d_in_max: usize,
    pub d_out_max: usize,
    /// Every target in `(layer, module)` order.
    pub specs: Vec<ModuleSpec>,
    backbone: BackboneConfig,
}

impl Layout {
    pub fn new(backbone: &BackboneConfig, gen: &GeneratorConfig) -> Result<Self> {
        backbone.validate()?;
        gen.validate()?;
        let specs = crate::backbone::module_specs(backbone, &gen.target_modules);
        let d_in_max = specs.iter().map(|s| s.d_in).max().unwrap_or(0);
        let d_out_max = specs.iter().map(|s| s.d_out).max().unwrap_or(0);
        Ok(Self {
            n_layers: backbone.n_layers,
            kinds: gen.target_modules.clone(),
            rank: gen.rank,
            d_in_max,
            d_out_max,
            specs,
            backbone: backbone.clone(),
        })
    }

    /// Rank rows per layer, `H = H_A + H_B = 2r`.
    pub fn rows(&self) -> usize {
        2 * self.rank
    }

    /// Module columns per layer, `W = M`.
    pub fn cols(&self) -> usize {
        self.kinds.len()
    }

    /// `S = H·W`
    pub fn slots(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn slot(&self, row: usize, module: usize) -> usize {
        row * self.cols() + module
    }

    pub fn dims(&self, kind: ModuleKind) -> (usize, usize) {
        kind.dims(&self.backbone)
    }

    pub fn kind_index(&self, kind: ModuleKind) -> Option<usize> {
        self.kinds.iter().position(|&k| k == kind)
    }

    /// Length of the dense flattened update, `Σ d_out·d_in`.
    pub fn dense_len(&self) -> usize {
        self.specs.iter().map(|s| s.d_in * s.d_out).sum()
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.backbone
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormWeights {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormWeights {
    fn init(d: usize) -> Result<Self> {
        Ok(Self { gain: nn::ones(&[d])?, bias: nn::zeros(&[d])? })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        nn::layer_norm(x, &self.gain, &self.bias, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln_l: LayerNormWeights,
    pub sa_l: AttnProj,
    pub ln_hw: LayerNormWeights,
    pub sa_hw: AttnProj,
    pub ln_ca: LayerNormWeights,
    pub ca: AttnProj,
    pub ln_ffn: LayerNormWeights,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BlockWeights {
    fn init(rng: &mut nn::Rng, cfg: &GeneratorConfig) -> Result<Self> {
        let d = cfg.d_pg;
        let f = cfg.ffn_mult * d;
        let std_d = fan_in_std(d);
        Ok(Self {
            ln_l: LayerNormWeights::init(d)?,
            sa_l: AttnProj::init(rng, d, std_d)?,
            ln_hw: LayerNormWeights::init(d)?,
            sa_hw: AttnProj::init(rng, d, std_d)?,
            ln_ca: LayerNormWeights::init(d)?,
            ca: AttnProj::init(rng, d, std_d)?,
            ln_ffn: LayerNormWeights::init(d)?,
            w1: nn::normal_tensor(rng, &[f, d], std_d)?,
            b1: nn::zeros(&[f])?,
            w2: nn::normal_tensor(rng, &[d, f], fan_in_std(f))?,
            b2: nn::zeros(&[d])?,
        })
    }

    /// Block with every weight zero; its residual branches all vanish.
    pub fn zeros(cfg: &GeneratorConfig) -> Result<Self> {
        let d = cfg.d_pg;
        let f = cfg.ffn_mult * d;
        let ln = || -> Result<LayerNormWeights> { Ok(LayerNormWeights { gain: nn::zeros(&[d])?, bias: nn::zeros(&[d])? }) };
        Ok(Self {
            ln_l: ln()?,
            sa_l: AttnProj::zeros(d)?,
            ln_hw: ln()?,
            sa_hw: AttnProj::zeros(d)?,
            ln_ca: ln()?,
            ca: AttnProj::zeros(d)?,
            ln_ffn: ln()?,
            w1: nn::zeros(&[f, d])?,
            b1: nn::zeros(&[f])?,
            w2: nn::zeros(&[d, f])?,
            b2: nn::zeros(&[d])?,
        })
    }
}

/// `1/√fan_in`, used for every trunk projection so activations keep their scale.
pub fn fan_in_std(fan_in: usize) -> f32 {
    1.0 / (fan_in as f32).sqrt()
}

#[derive(Debug, Clone)]
pub struct GeneratorWeights {
    /// `[L, S, d_pg]`
    pub q_grid: Tensor,
    /// `[L, d_pg]`
    pub t_layer: Tensor,
    /// `[S, d_pg]`
    pub t_slot: Tensor,
    pub init_ca: AttnProj,
    pub blocks: Vec<BlockWeights>,
    /// `[d_in_max, d_pg]`
    pub h_a: Tensor,
    /// `[d_out_max, d_pg]`, zero at initialization.
    pub h_b: Tensor,
}

fn attn_named<'a>(prefix: &str, a: &'a AttnProj, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.q"), &a.q));
    out.push((format!("{prefix}.k"), &a.k));
    out.push((format!("{prefix}.v"), &a.v));
    out.push((format!("{prefix}.o"), &a.o));
}

fn attn_named_mut<'a>(prefix: &str, a: &'a mut AttnProj, out: &mut Vec<(String, &'a mut Tensor)>) {
    let AttnProj { q, k, v, o } = a;
    out.push((format!("{prefix}.q"), q));
    out.push((format!("{prefix}.k"), k));
    out.push((format!("{prefix}.v"), v));
    out.push((format!("{prefix}.o"), o));
}

impl GeneratorWeights {
    pub fn init(layout: &Layout, cfg: &GeneratorConfig, rng: &mut nn::Rng) -> Result<Self> {
        let d = cfg.d_pg;
        let s = layout.slots();
        let std = cfg.init_std;
        let q_grid = nn::normal_tensor(rng, &[layout.n_layers, s, d], std)?;
        let t_layer = nn::normal_tensor(rng, &[layout.n_layers, d], std)?;
        let t_slot = nn::normal_tensor(rng, &[s, d], std)?;
        let init_ca = AttnProj::init(rng, d, fan_in_std(d))?;
        let blocks = (0..cfg.n_blocks).map(|_| BlockWeights::init(rng, cfg)).collect::<Result<Vec<_>>>()?;
        let h_a = nn::normal_tensor(rng, &[layout.d_in_max, d], std)?;
        let h_b = nn::zeros(&[layout.d_out_max, d])?;
        Ok(Self { q_grid, t_layer, t_slot, init_ca, blocks, h_a, h_b })
    }

    /// All tensors with names relative to the `gen.` prefix, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("q_grid".into(), &self.q_grid),
            ("t_layer".into(), &self.t_layer),
            ("t_slot".into(), &self.t_slot),
        ];
        attn_named("init_ca", &self.init_ca, &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            for (n, ln) in [("ln_l", &b.ln_l), ("ln_hw", &b.ln_hw), ("ln_ca", &b.ln_ca), ("ln_ffn", &b.ln_ffn)] {
                out.push((format!("{p}.{n}.gain"), &ln.gain));
                out.push((format!("{p}.{n}.bias"), &ln.bias));
            }
            attn_named(&format!("{p}.sa_l"), &b.sa_l, &mut out);
            attn_named(&format!("{p}.sa_hw"), &b.sa_hw, &mut out);
            attn_named(&format!("{p}.ca"), &b.ca, &mut out);
            out.push((format!("{p}.ffn.w1"), &b.w1));
            out.push((format!("{p}.ffn.b1"), &b.b1));
            out.push((format!("{p}.ffn.w2"), &b.w2));
            out.push((format!("{p}.ffn.b2"), &b.b2));
        }
        out.push(("h_a".into(), &self.h_a));
        out.push(("h_b".into(), &self.h_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("q_grid".into(), &mut self.q_grid),
            ("t_layer".into(), &mut self.t_layer),
            ("t_slot".into(), &mut self.t_slot),
        ];
        attn_named_mut("init_ca", &mut self.init_ca, &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            let BlockWeights { ln_l, sa_l, ln_hw, sa_hw, ln_ca, ca, ln_ffn, w1, b1, w2, b2 } = b;
            for (n, ln) in [("ln_l", ln_l), ("ln_hw", ln_hw), ("ln_ca", ln_ca), ("ln_ffn", ln_ffn)] {
                let LayerNormWeights { gain, bias } = ln;
                out.push((format!("{p}.{n}.gain"), gain));
                out.push((format!("{p}.{n}.bias"), bias));
            }
            attn_named_mut(&format!("{p}.sa_l"), sa_l, &mut out);
            attn_named_mut(&format!("{p}.sa_hw"), sa_hw, &mut out);
            attn_named_mut(&format!("{p}.ca"), ca, &mut out);
            out.push((format!("{p}.ffn.w1"), w1));
            out.push((format!("{p}.ffn.b1"), b1));
            out.push((format!("{p}.ffn.w2"), w2));
            out.push((format!("{p}.ffn.b2"), b2));
        }
        out.push(("h_a".into(), &mut self.h_a));
        out.push(("h_b".into(), &mut self.h_b));
        out
    }
}

/// Factors for one instance. `a[m]` is `[L, r, d_in]` and `b[m]` is `[L, d_out, r]` for
/// module column `m`.
#[derive(Debug, Clone)]
pub struct LoraFactorSet {
    pub kinds: Vec<ModuleKind>,
    pub n_layers: usize,
    pub rank: usize,
    pub a: Vec<Tensor>,
    pub b: Vec<Tensor>,
}

impl LoraFactorSet {
    fn column(&self, kind: ModuleKind) -> Result<usize> {
        self.kinds
            .iter()
            .position(|&k| k == kind)
            .ok_or_else(|| TflowError::Config(format!("module {kind} is not targeted")))
    }

    /// `A[l, m]`, `[r, d_in]`.
    pub fn a(&self, layer: usize, kind: ModuleKind) -> Result<Tensor> {
        Ok(self.a[self.column(kind)?].get(layer)?)
    }

    /// `B[l, m]`, `[d_out, r]`.
    pub fn b(&self, layer: usize, kind: ModuleKind) -> Result<Tensor> {
        Ok(self.b[self.column(kind)?].get(layer)?)
    }

    pub fn len(&self) -> usize {
        self.n_layers * self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(layer, kind)` pairs in `(layer, module)` order.
    pub fn targets(&self) -> Vec<(usize, ModuleKind)> {
        (0..self.n_layers).flat_map(|l| self.kinds.iter().map(move |&k| (l, k))).collect()
    }

    pub fn same_targets(&self, other: &LoraFactorSet) -> bool {
        self.kinds == other.kinds
            && self.n_layers == other.n_layers
            && self.rank == other.rank
            && self.a.iter().zip(&other.a).all(|(x, y)| x.dims() == y.dims())
            && self.b.iter().zip(&other.b).all(|(x, y)| x.dims() == y.dims())
    }

    /// Builds a set from per-target factor lists in `(layer, module)` order.
    pub fn from_pairs(layout: &Layout, pairs: &[(Tensor, Tensor)]) -> Result<Self> {
        if pairs.len() != layout.specs.len() {
            return Err(TflowError::Config(format!(
                "{} factor pairs for {} targets",
                pairs.len(),
                layout.specs.len()
            )));
        }
        let m = layout.cols();
        let mut a = Vec::with_capacity(m);
        let mut b = Vec::with_capacity(m);
        for col in 0..m {
            let mut av = Vec::with_capacity(layout.n_layers);
            let mut bv = Vec::with_capacity(layout.n_layers);
            for l in 0..layout.n_layers {
                let spec = &layout.specs[l * m + col];
                let (pa, pb) = &pairs[l * m + col];
                if pa.dims() != [layout.rank, spec.d_in] || pb.dims() != [spec.d_out, layout.rank] {
                    return Err(TflowError::Shape(format!(
                        "factor shapes {:?}/{:?} do not match target {:?}",
                        pa.dims(),
                        pb.dims(),
                        spec
                    )));
                }
                av.push(pa.clone());
                bv.push(pb.clone());
            }
            a.push(Tensor::stack(&av, 0)?);
            b.push(Tensor::stack(&bv, 0)?);
        }
        Ok(Self { kinds: layout.kinds.clone(), n_layers: layout.n_layers, rank: layout.rank, a, b })
    }

    /// `(A, B) → (G·A, B·G⁻¹)` for an invertible `G [r, r]`.
    pub fn reparameterize(&self, g: &Tensor, g_inv: &Tensor) -> Result<Self> {
        let mut out = self.clone();
        for (a, b) in out.a.iter_mut().zip(out.b.iter_mut()) {
            let l = a.dim(0)?;
            let gb = g.unsqueeze(0)?.broadcast_as((l, self.rank, self.rank))?.contiguous()?;
            let gib = g_inv.unsqueeze(0)?.broadcast_as((l, self.rank, self.rank))?.contiguous()?;
            *a = gb.matmul(&a.contiguous()?)?;
            *b = b.contiguous()?.matmul(&gib)?;
        }
        Ok(out)
    }

    pub fn detach(&self) -> Self {
        let mut out = self.clone();
        for t in out.a.iter_mut().chain(out.b.iter_mut()) {
            *t = t.detach();
        }
        out
    }

    /// Every entry of every factor, `A` factors first.
    pub fn entries(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for t in &self.a {
            a.extend(nn::to_f64_vec(t)?);
        }
        for t in &self.b {
            b.extend(nn::to_f64_vec(t)?);
        }
        Ok((a, b))
    }
}

/// Factors for `G` instances at once: `a[m]` is `[G, L, r, d_in]` and `b[m]` is
/// `[G, L, d_out, r]`.
#[derive(Debug, Clone)]
pub struct FactorBatch {
    pub kinds: Vec<ModuleKind>,
    pub n_layers: usize,
    pub rank: usize,
    pub a: Vec<Tensor>,
    pub b: Vec<Tensor>,
}

impl FactorBatch {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.a[0].dim(0)?)
    }

    /// Instances `start..start + len` as a smaller batch.
    pub fn narrow(&self, start: usize, len: usize) -> Result<FactorBatch> {
        Ok(FactorBatch {
            kinds: self.kinds.clone(),
            n_layers: self.n_layers,
            rank: self.rank,
            a: self.a.iter().map(|t| t.narrow(0, start, len)).collect::<std::result::Result<_, _>>()?,
            b: self.b.iter().map(|t| t.narrow(0, start, len)).collect::<std::result::Result<_, _>>()?,
        })
    }

    pub fn instance(&self, g: usize) -> Result<LoraFactorSet> {
        Ok(LoraFactorSet {
            kinds: self.kinds.clone(),
            n_layers: self.n_layers,
            rank: self.rank,
            a: self.a.iter().map(|t| t.get(g)).collect::<std::result::Result<_, _>>()?,
            b: self.b.iter().map(|t| t.get(g)).collect::<std::result::Result<_, _>>()?,
        })
    }

    pub fn stack(sets: &[LoraFactorSet]) -> Result<FactorBatch> {
        let first = sets.first().ok_or_else(|| TflowError::Input("no factor sets".into()))?;
        if let Some(bad) = sets.iter().position(|s| !s.same_targets(first)) {
            return Err(TflowError::Config(format!("factor set {bad} covers different targets")));
        }
        let col = |pick: &dyn Fn(&LoraFactorSet) -> &Vec<Tensor>, m: usize| -> Result<Tensor> {
            let parts: Vec<&Tensor> = sets.iter().map(|s| &pick(s)[m]).collect();
            Ok(Tensor::stack(&parts, 0)?)
        };
        let m = first.kinds.len();
        Ok(FactorBatch {
            kinds: first.kinds.clone(),
            n_layers: first.n_layers,
            rank: first.rank,
            a: (0..m).map(|i| col(&|s| &s.a, i)).collect::<Result<_>>()?,
            b: (0..m).map(|i| col(&|s| &s.b, i)).collect::<Result<_>>()?,
        })
    }
}

/// Right-pads conditioning matrices `[T_i, d]` into `[G, T_max, d]` plus lengths.
pub fn pad_conditioning(items: &[Tensor]) -> Result<(Tensor, Vec<usize>)> {
    if items.is_empty() {
        return Err(TflowError::Input("no conditioning signals".into()));
    }
    let lengths: Vec<usize> = items.iter().map(|t| t.dim(0)).collect::<std::result::Result<_, _>>()?;
    if lengths.contains(&0) {
        return Err(TflowError::Input("empty conditioning signal".into()));
    }
    let t_max = *lengths.iter().max().unwrap();
    let padded = items
        .iter()
        .zip(&lengths)
        .map(|(t, &len)| {
            if len == t_max {
                Ok(t.clone())
            } else {
                Ok(t.pad_with_zeros(0, 0, t_max - len)?)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&padded, 0)?, lengths))
}

/// A generator bound to its configuration, layout and (possibly tracked) weights.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub layout: Layout,
    pub weights: GeneratorWeights,
}

impl Generator {
    pub fn new(config: GeneratorConfig, layout: Layout, weights: GeneratorWeights) -> Result<Self> {
        config.validate()?;
        let s = layout.slots();
        let d = config.d_pg;
        let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.dims() != shape {
                return Err(TflowError::Shape(format!("gen.{name}: expected {shape:?}, got {:?}", t.dims())));
            }
            Ok(())
        };
        expect("q_grid", &weights.q_grid, &[layout.n_layers, s, d])?;
        expect("t_layer", &weights.t_layer, &[layout.n_layers, d])?;
        expect("t_slot", &weights.t_slot, &[s, d])?;
        expect("h_a", &weights.h_a, &[layout.d_in_max, d])?;
        expect("h_b", &weights.h_b, &[layout.d_out_max, d])?;
        if weights.blocks.len() != config.n_blocks {
            return Err(TflowError::Shape(format!("{} blocks, expected {}", weights.blocks.len(), config.n_blocks)));
        }
        Ok(Self { config, layout, weights })
    }

    fn rope(&self, len: usize, dtype: DType) -> Result<Rope> {
        Rope::range(0, len, self.config.head_dim(), self.config.rope_base, dtype)
    }

    /// `Z⁰ = CA(Q_grid, C̃, C̃) + T_layer + T_slot` for `ctilde [G, T, d_pg]`.
    pub fn init_grid(&self, ctilde: &Tensor, lengths: Option<&[usize]>) -> Result<Tensor> {
        let (g, t, d) = ctilde.dims3()?;
        if t == 0 {
            return Err(TflowError::Input("empty conditioning signal".into()));
        }
        let w = &self.weights;
        let (l, s) = (self.layout.n_layers, self.layout.slots());
        let dtype = ctilde.dtype();
        let queries = w.q_grid.reshape((1, l * s, d))?.broadcast_as((g, l * s, d))?.contiguous()?;
        let rope_k = self.rope(t, dtype)?;
        let mask = lengths.map(|lens| nn::key_padding_mask(lens, t, dtype)).transpose()?;
        let read = w.init_ca.forward(&queries, ctilde, self.config.n_heads, None, Some(&rope_k), mask.as_ref())?;
        let read = read.reshape((g, l, s, d))?;
        let pos = w.t_layer.reshape((1, l, 1, d))?.broadcast_add(&w.t_slot.reshape((1, 1, s, d))?)?;
        Ok(read.broadcast_add(&pos)?)
    }

    /// One multi-axis block on `z [G, L, S, d]`.
    pub fn block(&self, z: &Tensor, ctilde: &Tensor, lengths: Option<&[usize]>, bw: &BlockWeights) -> Result<Tensor> {
        let (g, l, s, d) = z.dims4()?;
        if ctilde.dim(0)? != g || ctilde.dim(2)? != d {
            return Err(TflowError::Shape(format!(
                "grid {:?} and conditioning {:?} disagree",
                z.dims(),
                ctilde.dims()
            )));
        }
        let dtype = z.dtype();
        let heads = self.config.n_heads;

        let x = bw.ln_l.apply(z)?.transpose(1, 2)?.contiguous()?.reshape((g * s, l, d))?;
        let rope_l = self.rope(l, dtype)?;
        let y = bw.sa_l.forward(&x, &x, heads, Some(&rope_l), Some(&rope_l), None)?;
        let z = (z + y.reshape((g, s, l, d))?.transpose(1, 2)?)?;

        let x = bw.ln_hw.apply(&z)?.reshape((g * l, s, d))?;
        let rope_s = self.rope(s, dtype)?;
        let y = bw.sa_hw.forward(&x, &x, heads, Some(&rope_s), Some(&rope_s), None)?;
        let z = (z + y.reshape((g, l, s, d))?)?;

        let t = ctilde.dim(1)?;
        let x = bw.ln_ca.apply(&z)?.reshape((g, l * s, d))?;
        let rope_k = self.rope(t, dtype)?;
        let mask = lengths.map(|lens| nn::key_padding_mask(lens, t, dtype)).transpose()?;
        let y = bw.ca.forward(&x, ctilde, heads, None, Some(&rope_k), mask.as_ref())?;
        let z = (z + y.reshape((g, l, s, d))?)?;

        let x = bw.ln_ffn.apply(&z)?;
        let hdn = nn::silu(&nn::linear(&x, &bw.w1)?.broadcast_add(&bw.b1)?)?;
        let y = nn::linear(&hdn, &bw.w2)?.broadcast_add(&bw.b2)?;
        Ok((z + y)?)
    }

    /// Reads `z [G, L, S, d]` out as factors for every target.
    pub fn detokenize(&self, z: &Tensor) -> Result<FactorBatch> {
        let (g, l, s, d) = z.dims4()?;
        let lay = &self.layout;
        if l != lay.n_layers || s != lay.slots() {
            return Err(TflowError::Shape(format!("grid {:?} does not match the target layout", z.dims())));
        }
        let (r, w) = (lay.rank, lay.cols());
        let grid = z.reshape((g, l, 2 * r, w, d))?;
        let a_out = nn::linear(&grid.narrow(2, 0, r)?, &self.weights.h_a)?;
        let b_out = nn::linear(&grid.narrow(2, r, r)?, &self.weights.h_b)?;
        let mut a = Vec::with_capacity(w);
        let mut b = Vec::with_capacity(w);
        for (m, &kind) in lay.kinds.iter().enumerate() {
            let (d_in, d_out) = lay.dims(kind);
            a.push(a_out.narrow(3, m, 1)?.squeeze(3)?.narrow(3, 0, d_in)?.contiguous()?);
            b.push(b_out.narrow(3, m, 1)?.squeeze(3)?.narrow(3, 0, d_out)?.transpose(2, 3)?.contiguous()?);
        }
        Ok(FactorBatch { kinds: lay.kinds.clone(), n_layers: l, rank: r, a, b })
    }

    /// Full trunk on a padded batch of projected conditioning.
    pub fn forward_padded(&self, ctilde: &Tensor, lengths: Option<&[usize]>) -> Result<FactorBatch> {
        let mut z = self.init_grid(ctilde, lengths)?;
        for bw in &self.weights.blocks {
            z = self.block(&z, ctilde, lengths, bw)?;
        }
        self.detokenize(&z)
    }

    /// Factors for each projected conditioning matrix `[T_i, d_pg]`.
    pub fn generate(&self, ctilde: &[Tensor]) -> Result<FactorBatch> {
        let (padded, lengths) = pad_conditioning(ctilde)?;
        let ragged = lengths.iter().any(|&t| t != lengths[0]);
        self.forward_padded(&padded, ragged.then_some(lengths.as_slice()))
    }

    pub fn generate_one(&self, ctilde: &Tensor) -> Result<LoraFactorSet> {
        self.generate(std::slice::from_ref(ctilde))?.instance(0)
    }
}

/// Analytic generator MACs for one sender with `t` conditioning positions.
pub fn generator_macs(cfg: &GeneratorConfig, layout: &Layout, t: usize, d_model: usize) -> u64 {
    let d = cfg.d_pg;
    let n = layout.n_layers * layout.slots();
    let proj = t * d_model * d;
    let init = n * d * d * 2 + t * d * d * 2 + 2 * n * t * d;
    let sa_l = n * d * d * 4 + 2 * n * layout.n_layers * d;
    let sa_hw = n * d * d * 4 + 2 * n * layout.slots() * d;
    let ca = n * d * d * 2 + t * d * d * 2 + 2 * n * t * d;
    let ffn = 2 * n * d * cfg.ffn_mult * d;
    let heads = (n / 2) * d * (layout.d_in_max + layout.d_out_max);
    (proj + init + cfg.n_blocks * (sa_l + sa_hw + ca + ffn) + heads) as u64
}
