use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::DetectorModel;
use super::params::{Gradients, ParamRole, ParamSet};

/// Momentum state for task-parameter updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(params: &ParamSet, momentum: f64) -> Self {
        Self { momentum, velocity: params.values().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub(crate) fn from_parts(momentum: f64, velocity: Vec<Tensor>) -> Self {
        Self { momentum, velocity }
    }
}

fn check_finite(params: &ParamSet, grads: &Gradients, role: ParamRole) -> Result<()> {
    if grads.tensors().len() != params.len() {
        return Err(Error::Shape("gradient set does not match parameter set".into()));
    }
    for (p, g) in params.iter().zip(grads.tensors()) {
        if p.role == role && !g.all_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    Ok(())
}

/// ψ ← ψ − μ·v with v ← m·v + g_ψ. Warp parameters are not read or written.
pub fn apply_task_update(model: &mut DetectorModel, opt: &mut SgdMomentum, grads: &Gradients, mu: f64) -> Result<()> {
    check_finite(model.params(), grads, ParamRole::Task)?;
    if opt.velocity.len() != model.params().len() {
        return Err(Error::Shape("optimizer state does not match parameter set".into()));
    }
    let m = opt.momentum;
    for ((p, g), v) in model.params_mut().iter_mut().zip(grads.tensors()).zip(&mut opt.velocity) {
        if p.role != ParamRole::Task {
            continue;
        }
        for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = m * *vi + gi;
            *w -= mu * *vi;
        }
    }
    Ok(())
}

/// φ ← φ − υ·g_φ, plain SGD. Task parameters are not read or written.
pub fn apply_warp_update(model: &mut DetectorModel, grads: &Gradients, upsilon: f64) -> Result<()> {
    check_finite(model.params(), grads, ParamRole::Warp)?;
    for (p, g) in model.params_mut().iter_mut().zip(grads.tensors()) {
        if p.role == ParamRole::Warp {
            p.value.add_scaled(g, -upsilon);
        }
    }
    Ok(())
}
