use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
pub const MAX_TRUST_RATIO: f64 = 10.0;

/// Adam moments plus the LARS switch. With LARS on, every tensor of rank ≥ 2
/// gets weight decay and a trust ratio; rank-1 tensors (biases) take the
/// plain Adam step. With LARS off the update is plain Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub lars: bool,
    pub weight_decay: f64,
    pub m: ParamSet,
    pub v: ParamSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub lars: bool,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, lars: bool, weight_decay: f64) -> Self {
        OptimizerState {
            step: 0,
            lars,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn meta(&self) -> OptimizerMeta {
        OptimizerMeta {
            step: self.step,
            lars: self.lars,
            weight_decay: self.weight_decay,
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖w‖ / (‖u‖ + λ‖w‖)`, clipped to `[0, 10]`; 1 when either norm vanishes.
pub fn trust_ratio(w_norm: f64, update_norm: f64, weight_decay: f64) -> f64 {
    if w_norm == 0.0 || update_norm == 0.0 {
        return 1.0;
    }
    (w_norm / (update_norm + weight_decay * w_norm)).clamp(0.0, MAX_TRUST_RATIO)
}

/// One Adam (optionally LARS-wrapped) update in place. Parameters without a
/// gradient entry are an error; gradient entries without a parameter are ignored.
pub fn adam_lars_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptimizerState, lr: f64) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("no gradient for parameter `{name}`")))?;
        let w = params.get_mut(&name).expect("listed");
        if g.shape() != w.shape() {
            return Err(Error::shape(format!("gradient of `{name}` has shape {:?}", g.shape())));
        }
        let m = state
            .m
            .get_mut(&name)
            .ok_or_else(|| Error::invalid(format!("no optimizer state for `{name}`")))?;
        let v = state.v.get_mut(&name).expect("m and v share names");
        let mut update = vec![0.0; w.len()];
        for i in 0..w.len() {
            let gi = g.data()[i];
            let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * gi;
            let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            update[i] = (mi / bc1) / ((vi / bc2).sqrt() + EPSILON);
        }
        if state.lars && w.shape().len() >= 2 {
            let wn = norm(w.data());
            let eta = trust_ratio(wn, norm(&update), state.weight_decay);
            let lambda = state.weight_decay;
            for (wi, ui) in w.data_mut().iter_mut().zip(&update) {
                *wi -= lr * eta * (ui + lambda * *wi);
            }
        } else {
            for (wi, ui) in w.data_mut().iter_mut().zip(&update) {
                *wi -= lr * ui;
            }
        }
    }
    Ok(())
}
