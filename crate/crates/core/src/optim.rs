//! Named parameter sets and an adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TflowError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, max_grad_norm: Some(1.0) }
    }
}

/// Trainable tensors keyed by dotted name. Iteration order is the sorted name order.
#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `t` as a variable and returns the tracked tensor to store in the model.
    pub fn register(&mut self, name: impl Into<String>, t: Tensor) -> Result<Tensor> {
        let name = name.into();
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        if self.vars.insert(name.clone(), var).is_some() {
            return Err(TflowError::Config(format!("duplicate parameter name {name}")));
        }
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites the value of an existing variable in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| TflowError::Config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(TflowError::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach()))).collect()
    }
}

/// Per-parameter gradients collected from a backward pass; missing entries are zero.
pub fn collect_grads(params: &ParamSet, grads: &GradStore) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, var) in params.iter() {
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.clone(),
            None => var.as_tensor().zeros_like()?,
        };
        out.insert(name.clone(), g);
    }
    Ok(out)
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut total = 0.0f64;
    for g in grads.values() {
        let sq: f64 = g.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.to_scalar()?;
        total += sq;
    }
    Ok(total.sqrt())
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let norm = global_norm(grads)?;
        if !norm.is_finite() {
            return Err(TflowError::Training(format!("non-finite gradient norm {norm}")));
        }
        let clip = match self.config.max_grad_norm {
            Some(max) if norm > max => max / (norm + 1e-12),
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| TflowError::State(format!("missing gradient for {name}")))?;
            let g = if clip != 1.0 { (g * clip)? } else { g.clone() };
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((v_prev * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let theta = var.as_tensor().detach();
            let decayed = (&theta * (1.0 - c.lr * c.weight_decay))?;
            let denom = ((&v * (1.0 / bc2))?.sqrt()? + c.eps)?;
            let update = ((&m * (c.lr / bc1))? / denom)?;
            var.set(&(decayed - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};

    #[test]
    fn minimises_a_quadratic() {
        let mut ps = ParamSet::new();
        let x = ps.register("x", Tensor::new(&[3.0f32, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() });
        for _ in 0..300 {
            let loss = x.sqr().unwrap().sum_all().unwrap();
            let grads = collect_grads(&ps, &loss.backward().unwrap()).unwrap();
            opt.step(&ps, &grads).unwrap();
        }
        let v = x.to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|e| e.abs() < 0.05), "{v:?}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        let t = Tensor::new(&[1.0f32], &Device::Cpu).unwrap();
        ps.register("a", t.clone()).unwrap();
        assert!(ps.register("a", t).is_err());
    }
}
