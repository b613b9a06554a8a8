//! Adam with per-group learning rates and the warmup/decay schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.95;
pub const EPS: f64 = 1e-8;

/// Linear ramp `0 → base` over the first `warmup_frac` of the steps, then
/// linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total) as f64;
    let total = total as f64;
    // At least one decay step so the peak is always reached.
    let warmup = (warmup_frac * total).round().min(total - 1.0);
    if warmup > 0.0 && step < warmup {
        base * step / warmup
    } else {
        base * (total - step) / (total - warmup)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Bias-corrected Adam without weight decay. Moments exist only for
/// parameters that have received a gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub steps: u64,
    pub moments: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update. `lr` maps each group to its current learning rate; frozen
    /// parameters are never touched even if a gradient is supplied.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: impl Fn(Group) -> f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (id, g) in grads {
            let Ok(param) = store.get(*id) else { continue };
            if param.group == Group::Frozen {
                continue;
            }
            let rate = lr(param.group);
            let n = g.len();
            let mom = self.moments.entry(*id).or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let w = store.value_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                mom.m[i] = BETA1 * mom.m[i] + (1.0 - BETA1) * gi;
                mom.v[i] = BETA2 * mom.v[i] + (1.0 - BETA2) * gi * gi;
                let mh = mom.m[i] / c1;
                let vh = mom.v[i] / c2;
                w[i] -= rate * mh / (vh.sqrt() + EPS);
            }
        }
    }
}
