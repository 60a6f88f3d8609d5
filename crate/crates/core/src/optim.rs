//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear ramp from 0 over `warmup_steps`, then `base·½(1 + cos(π·p))`
/// where `p` runs from 0 at the end of warmup to 1 at `total_steps - 1`.
pub fn lr_at(base: f64, step: usize, warmup_steps: usize, total_steps: usize) -> f64 {
    if step < warmup_steps {
        return base * step as f64 / warmup_steps as f64;
    }
    let last = total_steps.saturating_sub(1);
    if step >= last {
        return if last <= warmup_steps && step == warmup_steps { base } else { 0.0 };
    }
    let progress = (step - warmup_steps) as f64 / (last - warmup_steps) as f64;
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// First and second moments for every parameter, plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())))
            .unzip();
        Self { step: 0, m, v }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Per-parameter inputs to one [`adamw_update`].
#[derive(Debug, Clone, Copy)]
pub struct UpdateSpec<'a> {
    pub name: &'a str,
    pub rate: f64,
    pub weight_decay: f64,
    /// Rows (along axis 0) that may change; `None` updates every row.
    pub row_mask: Option<&'a [bool]>,
}

/// One bias-corrected AdamW update of `param` at step `t` (1-based):
/// `θ ← θ - rate·m̂/(√v̂ + eps) - rate·decay·θ`. Masked-out rows keep both
/// their values and their moments.
pub fn adamw_update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    spec: UpdateSpec<'_>,
) -> Result<()> {
    if grad.shape() != param.shape() || m.shape() != param.shape() || v.shape() != param.shape() {
        return Err(Error::shape("adamw_update", param.shape(), grad.shape()));
    }
    if let Some(k) = grad.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(
            "adamw_update",
            format!("non-finite gradient in parameter {} at element {k}", spec.name),
        ));
    }
    let width = if param.ndim() == 0 { 1 } else { param.numel() / param.shape()[0] };
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    let (md, vd) = (m.data_mut(), v.data_mut());
    let gd = grad.data();
    for (k, p) in param.data_mut().iter_mut().enumerate() {
        if let Some(mask) = spec.row_mask {
            if !mask[k / width] {
                continue;
            }
        }
        md[k] = BETA1 * md[k] + (1.0 - BETA1) * gd[k];
        vd[k] = BETA2 * vd[k] + (1.0 - BETA2) * gd[k] * gd[k];
        let mh = md[k] / bc1;
        let vh = vd[k] / bc2;
        *p -= spec.rate * (mh / (vh.sqrt() + ADAM_EPS)) + spec.rate * spec.weight_decay * *p;
    }
    Ok(())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for g in grads {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
    norm
}
