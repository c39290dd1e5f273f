use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled decay: `w ← w − lr·wd·w` alongside the adaptive step.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamVector, config: AdamConfig) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay, in place.
///
/// Non-finite gradients leave both `params` and `state` untouched.
pub fn adam_step(
    params: &mut ParamVector,
    grads: &ParamVector,
    state: &mut AdamState,
) -> Result<()> {
    params.check_congruent(grads)?;
    params.check_congruent(&state.m)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = (1.0 - (beta1 as f64).powi(t)) as f32;
    let bc2 = (1.0 - (beta2 as f64).powi(t)) as f32;
    let decay = lr * weight_decay;

    let segs = params.segments_mut().iter_mut().zip(grads.segments()).zip(
        state
            .m
            .segments_mut()
            .iter_mut()
            .zip(state.v.segments_mut().iter_mut()),
    );
    for ((p, g), (m, v)) in segs {
        for (((w, &gv), mv), vv) in p
            .data
            .iter_mut()
            .zip(&g.data)
            .zip(m.data.iter_mut())
            .zip(v.data.iter_mut())
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *w = *w - lr * (m_hat / (v_hat.sqrt() + eps)) - decay * *w;
        }
    }
    Ok(())
}
