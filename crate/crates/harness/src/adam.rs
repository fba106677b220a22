use kpose::nn::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One bias-corrected Adam update. Moments and parameters are stored in `f32`,
/// the update itself is evaluated in `f64`.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &ParamStore<f32>,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(HarnessError::Config("parameter, gradient and moment layouts differ".into()));
    }
    let step = state.t + 1;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(HarnessError::NonFiniteGradient { param: name.to_string(), step });
    }
    state.t = step;
    let AdamHyper { beta1, beta2, eps } = *hyper;
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let g = g as f64;
            let m_new = beta1 * *m as f64 + (1.0 - beta1) * g;
            let v_new = beta2 * *v as f64 + (1.0 - beta2) * g * g;
            *m = m_new as f32;
            *v = v_new as f32;
            let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
            *p = (*p as f64 - update) as f32;
        }
    }
    Ok(())
}
