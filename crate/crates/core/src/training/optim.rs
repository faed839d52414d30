use serde::{Deserialize, Serialize};

use super::TrainingError;

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

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One AdamW update in place. Weight decay is decoupled: the weights shrink
/// by `lr * weight_decay` before the bias-corrected adaptive step.
pub fn adamw_step(
    weights: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    hyper: AdamHyper,
) -> Result<(), TrainingError> {
    if weights.len() != grads.len() || weights.len() != state.m.len() || weights.len() != state.v.len() {
        return Err(TrainingError::InvalidConfig(format!(
            "optimizer shapes differ: weights {}, grads {}, state {}",
            weights.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TrainingError::InvalidConfig(format!("learning rate {lr}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for i in 0..weights.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let w = weights[i] * decay - lr * m_hat / (v_hat.sqrt() + hyper.eps);
        if !w.is_finite() {
            return Err(TrainingError::NonFiniteUpdate(i));
        }
        weights[i] = w;
    }
    Ok(())
}

/// Cosine one-cycle schedule: warm up from `max_lr / div_factor` to `max_lr`
/// at step `round(pct_start * total_steps)`, then anneal to
/// `max_lr / final_div_factor` at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn peak_step(&self) -> usize {
        let raw = (self.pct_start * self.total_steps as f64).round() as usize;
        raw.clamp(1, self.total_steps.saturating_sub(1).max(1))
    }

    pub fn lr(&self, step: usize) -> Result<f64, TrainingError> {
        if step >= self.total_steps {
            return Err(TrainingError::StepOutOfRange { step, total: self.total_steps });
        }
        let initial = self.max_lr / self.div_factor;
        let floor = self.max_lr / self.final_div_factor;
        if self.total_steps == 1 {
            return Ok(initial);
        }
        let peak = self.peak_step();
        let cos_between = |from: f64, to: f64, frac: f64| match frac {
            f if f <= 0.0 => from,
            f if f >= 1.0 => to,
            f => to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * f).cos()),
        };
        if step <= peak {
            Ok(cos_between(initial, self.max_lr, step as f64 / peak as f64))
        } else {
            let span = (self.total_steps - 1 - peak) as f64;
            Ok(cos_between(self.max_lr, floor, (step - peak) as f64 / span))
        }
    }
}
