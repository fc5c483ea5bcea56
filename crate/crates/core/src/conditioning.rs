//! Sender conditioning: temperature-scaled layer mixing of a hidden stack followed by
//! a bias-free projection into the generator width.

use candle_core::Tensor;

use crate::backbone::HiddenStack;
use crate::error::{Result, TflowError};
use crate::nn;

/// Learnable layer scalars `λ` and a fixed temperature `τ`.
#[derive(Debug, Clone)]
pub struct LayerAggregator {
    /// `[L_total + 1]`
    pub lambda: Tensor,
    pub tau: f64,
}

impl LayerAggregator {
    pub fn new(lambda: Tensor, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(TflowError::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self { lambda, tau })
    }

    /// `ρ = softmax(λ / τ)`
    pub fn layer_weights(&self) -> Result<Tensor> {
        layer_weights(&self.lambda, self.tau)
    }
}

pub fn layer_weights(lambda: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(TflowError::Config(format!("temperature must be positive, got {tau}")));
    }
    // centring first keeps the result exactly invariant to a shared shift
    let centred = lambda.broadcast_sub(&lambda.max_keepdim(candle_core::D::Minus1)?.detach())?;
    nn::softmax_last(&(centred / tau)?)
}

/// `C = Σ_l ρ_l H^(l)` over a single stack.
pub fn aggregate(hidden: &HiddenStack, rho: &Tensor) -> Result<Tensor> {
    let n = rho.dim(0)?;
    if n != hidden.len() {
        return Err(TflowError::Shape(format!("{} layer weights for {} hidden layers", n, hidden.len())));
    }
    let stacked = hidden.stacked()?;
    let (l, t, d) = stacked.dims3()?;
    let w = rho.reshape((1, l))?;
    Ok(w.matmul(&stacked.reshape((l, t * d))?)?.reshape((t, d))?)
}

/// Batched form: `hidden [G, L_total + 1, T, d]` → `[G, T, d]`.
pub fn aggregate_batched(hidden: &Tensor, rho: &Tensor) -> Result<Tensor> {
    let (g, l, t, d) = hidden.dims4()?;
    if rho.dim(0)? != l {
        return Err(TflowError::Shape(format!("{} layer weights for {} hidden layers", rho.dim(0)?, l)));
    }
    let w = rho.reshape((1, 1, l))?.broadcast_as((g, 1, l))?.contiguous()?;
    Ok(w.matmul(&hidden.reshape((g, l, t * d))?)?.reshape((g, t, d))?)
}

/// `C̃ = C · Pᵀ` with `P [d_pg, d_model]`.
pub fn project(raw: &Tensor, proj: &Tensor) -> Result<Tensor> {
    let d_in = raw.dim(candle_core::D::Minus1)?;
    if proj.rank() != 2 || proj.dim(1)? != d_in {
        return Err(TflowError::Shape(format!(
            "projection {:?} does not accept inputs of width {d_in}",
            proj.dims()
        )));
    }
    nn::linear(raw, proj)
}

/// Raw and projected conditioning for one sender.
#[derive(Debug, Clone)]
pub struct ConditioningSignal {
    /// `[T_i, d_model]`
    pub raw: Tensor,
    /// `[T_i, d_pg]`
    pub projected: Tensor,
}

pub fn condition(hidden: &HiddenStack, agg: &LayerAggregator, proj: &Tensor) -> Result<ConditioningSignal> {
    let raw = aggregate(hidden, &agg.layer_weights()?)?;
    let projected = project(&raw, proj)?;
    Ok(ConditioningSignal { raw, projected })
}
