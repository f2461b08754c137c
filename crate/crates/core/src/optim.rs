//! Decoupled-weight-decay adaptive-moment optimizer (AdamW) over grouped
//! parameter sets.

use crate::acoustic::params::{Gradients, ParamSet};
use std::collections::BTreeSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment estimates, shaped like the parameters they track.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A non-finite gradient was found; nothing was touched.
    SkippedNonFinite,
}

/// One AdamW update. Only groups named in `trainable` move (all groups when
/// `None`); parameters outside stay bit-identical. The decay term
/// `lr * weight_decay * p` is applied separately from the moment update.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    trainable: Option<&BTreeSet<String>>,
) -> StepOutcome {
    let in_scope = |name: &str| trainable.is_none_or(|t| t.contains(name));
    for (gi, group) in params.groups.iter().enumerate() {
        if !in_scope(&group.name) {
            continue;
        }
        for (ai, array) in group.arrays.iter().enumerate() {
            let g = &grads.groups[gi].arrays[ai].data;
            debug_assert_eq!(g.len(), array.data.len());
            if g.iter().any(|v| !v.is_finite()) {
                return StepOutcome::SkippedNonFinite;
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (gi, group) in params.groups.iter_mut().enumerate() {
        if !in_scope(&group.name) {
            continue;
        }
        for (ai, array) in group.arrays.iter_mut().enumerate() {
            let g = &grads.groups[gi].arrays[ai].data;
            let m = &mut state.m.groups[gi].arrays[ai].data;
            let v = &mut state.v.groups[gi].arrays[ai].data;
            for i in 0..array.data.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                array.data[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + weight_decay * array.data[i]);
            }
        }
    }
    StepOutcome::Applied
}
