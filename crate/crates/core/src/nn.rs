//! Small differentiable building blocks shared by the backbone and the generator.
//!
//! Everything here is expressed with primitive candle ops so that reverse-mode
//! gradients are available in both f32 and f64.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws an f32 tensor of the given shape from N(0, std).
pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f32) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

pub fn zeros(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::zeros(shape, DType::F32, &Device::Cpu)?)
}

pub fn ones(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::ones(shape, DType::F32, &Device::Cpu)?)
}

/// `x · wᵀ` for `x` of shape `[.., d_in]` and `w` of shape `[d_out, d_in]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let d_in = *dims.last().expect("linear input must have rank >= 1");
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((rows, d_in))?.matmul(&w.t()?)?;
    let mut out = dims;
    *out.last_mut().unwrap() = w.dim(0)?;
    Ok(y.reshape(out)?)
}

pub fn rms_norm(x: &Tensor, scale: &Tensor, eps: f64) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    let inv = (ms + eps)?.sqrt()?.recip()?;
    Ok(x.broadcast_mul(&inv)?.broadcast_mul(scale)?)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let inv = (var + eps)?.sqrt()?.recip()?;
    Ok(centered
        .broadcast_mul(&inv)?
        .broadcast_mul(gain)?
        .broadcast_add(bias)?)
}

/// Softmax over the last axis. The max shift is detached; softmax is shift invariant
/// so the gradient is unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    // x * sigmoid(x), written out so the backward pass only uses primitive ops.
    let sig = (x.neg()?.exp()? + 1.0)?.recip()?;
    Ok((x * sig)?)
}

/// Rotary position tables for a list of integer positions.
#[derive(Debug, Clone)]
pub struct Rope {
    cos: Tensor,
    sin: Tensor,
}

impl Rope {
    /// Tables for `positions`, head dimension `head_dim` (must be even).
    pub fn new(positions: &[usize], head_dim: usize, base: f64, dtype: DType) -> Result<Self> {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let inv_freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
                let angle = p as f64 * inv_freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        let shape = (positions.len(), half);
        let cos = Tensor::from_vec(cos, shape, &Device::Cpu)?.to_dtype(dtype)?;
        let sin = Tensor::from_vec(sin, shape, &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self { cos, sin })
    }

    pub fn range(start: usize, len: usize, head_dim: usize, base: f64, dtype: DType) -> Result<Self> {
        let positions: Vec<usize> = (start..start + len).collect();
        Self::new(&positions, head_dim, base, dtype)
    }

    /// Rotates `x` of shape `[.., T, head_dim]` (rotate-half convention).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let hd = x.dim(D::Minus1)?;
        let half = hd / 2;
        let x1 = x.narrow(D::Minus1, 0, half)?;
        let x2 = x.narrow(D::Minus1, half, half)?;
        let r1 = (x1.broadcast_mul(&self.cos)? - x2.broadcast_mul(&self.sin)?)?;
        let r2 = (x1.broadcast_mul(&self.sin)? + x2.broadcast_mul(&self.cos)?)?;
        Ok(Tensor::cat(&[r1, r2], D::Minus1)?)
    }
}

/// `[B, T, d] -> [B, H, T, d/H]`
pub fn split_heads(x: &Tensor, n_heads: usize) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    Ok(x.reshape((b, t, n_heads, d / n_heads))?.transpose(1, 2)?.contiguous()?)
}

/// `[B, H, T, hd] -> [B, T, H·hd]`
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, hd) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, t, h * hd))?)
}

/// Scaled dot-product attention on `[B, H, T, hd]` tensors. `mask` is additive and
/// broadcastable to `[B, H, Tq, Tk]`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let hd = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
    let scores = match mask {
        Some(m) => scores.broadcast_add(m)?,
        None => scores,
    };
    let p = softmax_last(&scores)?;
    Ok(p.matmul(v)?)
}

/// Additive key mask `[B, 1, 1, Tk]` from per-row valid lengths.
pub fn key_padding_mask(lengths: &[usize], t_max: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(lengths.len() * t_max);
    for &len in lengths {
        for j in 0..t_max {
            data.push(if j < len { 0.0f32 } else { f32::NEG_INFINITY });
        }
    }
    Ok(Tensor::from_vec(data, (lengths.len(), 1, 1, t_max), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Additive causal mask `[1, 1, Tq, Tk]` where query `i` sits at absolute position
/// `offset + i` and may see keys `0..=offset + i`.
pub fn causal_mask(tq: usize, tk: usize, offset: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(tq * tk);
    for i in 0..tq {
        for j in 0..tk {
            data.push(if j <= offset + i { 0.0f32 } else { f32::NEG_INFINITY });
        }
    }
    Ok(Tensor::from_vec(data, (1, 1, tq, tk), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Multi-head attention projections, each `[d, d]`, bias free.
#[derive(Debug, Clone)]
pub struct AttnProj {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub o: Tensor,
}

impl AttnProj {
    pub fn init(rng: &mut Rng, d: usize, std: f32) -> Result<Self> {
        Ok(Self {
            q: normal_tensor(rng, &[d, d], std)?,
            k: normal_tensor(rng, &[d, d], std)?,
            v: normal_tensor(rng, &[d, d], std)?,
            o: normal_tensor(rng, &[d, d], std)?,
        })
    }

    pub fn zeros(d: usize) -> Result<Self> {
        Ok(Self { q: zeros(&[d, d])?, k: zeros(&[d, d])?, v: zeros(&[d, d])?, o: zeros(&[d, d])? })
    }

    /// Full attention: queries from `xq [B, Tq, d]`, keys/values from `xkv [B, Tk, d]`.
    pub fn forward(
        &self,
        xq: &Tensor,
        xkv: &Tensor,
        n_heads: usize,
        rope_q: Option<&Rope>,
        rope_k: Option<&Rope>,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut q = split_heads(&linear(xq, &self.q)?, n_heads)?;
        let mut k = split_heads(&linear(xkv, &self.k)?, n_heads)?;
        let v = split_heads(&linear(xkv, &self.v)?, n_heads)?;
        if let Some(r) = rope_q {
            q = r.apply(&q)?;
        }
        if let Some(r) = rope_k {
            k = r.apply(&k)?;
        }
        let out = merge_heads(&attend(&q, &k, &v, mask)?)?;
        linear(&out, &self.o)
    }
}

/// Mean next-token negative log-likelihood over masked targets.
///
/// `logits [B, T, V]`, `tokens [B, T]` (u32), `mask [B, T]` where `mask[b, u] = 1`
/// marks token `u` as a target predicted from position `u - 1`.
pub fn masked_next_token_nll(logits: &Tensor, tokens: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, t, _) = logits.dims3()?;
    let logp = log_softmax_last(&logits.narrow(1, 0, t - 1)?)?;
    let targets = tokens.narrow(1, 1, t - 1)?.contiguous()?.reshape((b, t - 1, 1))?;
    let picked = logp.contiguous()?.gather(&targets, 2)?.reshape((b, t - 1))?;
    let m = mask.narrow(1, 1, t - 1)?.to_dtype(logits.dtype())?;
    let total = (picked * &m)?.sum_all()?;
    let count = m.sum_all()?;
    Ok(total.neg()?.div(&count)?)
}

/// Reads a tensor of any float dtype into an f64 vector.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
