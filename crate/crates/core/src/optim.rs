//! Noam-scheduled Adam and the central-difference gradient oracle.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, ParamSet};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// Learning rate at `step`:
/// `scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
/// Rises linearly for `step < warmup`, decays as `step^-0.5` after; the two
/// branches meet at `step == warmup`.
pub fn noam_rate(step: u64, d_model: usize, warmup: u64, scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidArg("noam rate undefined at step 0".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(scale * (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

/// Adam with the Noam learning-rate schedule. Moment state is carried across
/// calls; bias correction is applied as in standard Adam.
#[derive(Clone, Debug)]
pub struct NoamAdam {
    d_model: usize,
    warmup: u64,
    scale: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl NoamAdam {
    pub fn new(d_model: usize, warmup: u64, scale: f64) -> Self {
        Self::resumed(d_model, warmup, scale, 0)
    }

    /// Resume the schedule at a given completed-step count.
    pub fn resumed(d_model: usize, warmup: u64, scale: f64, step: u64) -> Self {
        Self {
            d_model,
            warmup,
            scale,
            step,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update; returns the learning rate that was applied.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<f64> {
        self.step += 1;
        let rate = noam_rate(self.step, self.d_model, self.warmup, self.scale)?;
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, grad) in grads.iter() {
            let value = params.get_mut(name)?;
            if value.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    op: "noam_step",
                    lhs: value.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let vd = value.data_mut();
            for ((p, g), (m, v)) in vd
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(rate)
    }
}

/// Central-difference gradient of `f` w.r.t. every parameter coordinate:
/// `(f(p+eps) - f(p-eps)) / (2 eps)`. This is the independent oracle for
/// [`crate::graph::Graph::backward`]; it only ever calls the forward
/// evaluator. `f` must be deterministic (run dropout-free graphs).
pub fn finite_diff_grad<F>(mut f: F, params: &ParamSet, eps: f64) -> Result<Gradients>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArg(format!("finite difference step {eps} must be > 0")));
    }
    let mut work = params.clone();
    let mut out = Gradients::default();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let numel = params.get(&name)?.numel();
        let mut grad = Tensor::zeros(params.get(&name)?.shape());
        for i in 0..numel {
            let original = params.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = original + eps;
            let plus = f(&work)?;
            work.get_mut(&name)?.data_mut()[i] = original - eps;
            let minus = f(&work)?;
            work.get_mut(&name)?.data_mut()[i] = original;
            grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.accumulate(&name, &grad);
    }
    Ok(out)
}
