//! Adam optimizer and the tri-phase learning-rate schedule (linear ramp,
//! hold, exponential decay to a floor).

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

/// Tri-phase schedule: linear ramp for the first 10% of steps, constant at
/// `peak_lr` for the next 40%, then exponential decay reaching
/// `peak_lr * floor_ratio` at step N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LRSchedule {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub floor_ratio: f64,
}

pub const RAMP_FRAC: f64 = 0.10;
pub const HOLD_FRAC: f64 = 0.40;

impl LRSchedule {
    pub fn new(peak_lr: f64, total_steps: usize) -> Self {
        LRSchedule { peak_lr, total_steps, floor_ratio: 0.01 }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let n = self.total_steps as f64;
        if step > self.total_steps {
            return Err(Error::input(format!("step {step} > total steps {}", self.total_steps)));
        }
        let t = step as f64;
        let ramp_end = RAMP_FRAC * n;
        let hold_end = (RAMP_FRAC + HOLD_FRAC) * n;
        if t < ramp_end {
            Ok(self.peak_lr * t / ramp_end)
        } else if t < hold_end {
            Ok(self.peak_lr)
        } else {
            let frac = (t - hold_end) / (n - hold_end);
            Ok(self.peak_lr * self.floor_ratio.powf(frac))
        }
    }
}

/// Per-parameter Adam moment buffers, aligned with store iteration order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        let v = store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        AdamState { m, v, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn moments_mut(&mut self, idx: usize) -> (&mut Tensor, &mut Tensor) {
        (&mut self.m[idx], &mut self.v[idx])
    }
}

/// One Adam update over every parameter. Grads must already be populated.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (idx, p) in store.iter_mut().enumerate() {
        for (i, &g) in p.grad.data().iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::Numerical {
                    param: p.name.clone(),
                    detail: format!("non-finite gradient {g} at flat index {i}"),
                });
            }
            let m = &mut state.m[idx].data_mut()[i];
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            let v = &mut state.v[idx].data_mut()[i];
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            p.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Param;

    #[test]
    fn schedule_endpoints_and_hold() {
        let s = LRSchedule { peak_lr: 1e-3, total_steps: 1000, floor_ratio: 0.01 };
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(300).unwrap() - 1e-3).abs() < 1e-18); // hold phase
        assert!((s.lr_at(100).unwrap() - 1e-3).abs() < 1e-18); // ramp end
        assert!((s.lr_at(500).unwrap() - 1e-3).abs() < 1e-18); // decay start
        // decay formula at N: peak * floor_ratio
        assert!((s.lr_at(1000).unwrap() - 1e-5).abs() < 1e-18);
        assert!(s.lr_at(1001).is_err());
    }

    #[test]
    fn schedule_is_continuous_at_phase_boundaries() {
        let s = LRSchedule { peak_lr: 2e-3, total_steps: 997, floor_ratio: 0.05 };
        let ramp_increment = s.peak_lr / (RAMP_FRAC * 997.0);
        let b1 = (RAMP_FRAC * 997.0).floor() as usize;
        let b2 = ((RAMP_FRAC + HOLD_FRAC) * 997.0).floor() as usize;
        assert!((s.lr_at(b1).unwrap() - s.peak_lr).abs() <= ramp_increment);
        assert!((s.lr_at(b2).unwrap() - s.peak_lr).abs() <= ramp_increment);
    }

    fn scalar_store(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut p = Param::new("w", Tensor::scalar(value), true);
        p.grad.data_mut()[0] = grad;
        s.insert(p).unwrap();
        s
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut store = scalar_store(1.5, 0.0);
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, 0.1).unwrap();
        assert_eq!(store.value("w").data()[0], 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // bias-corrected Adam first step: update = -lr * sign(g) up to eps
        let mut store = scalar_store(0.0, 3.7);
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, 0.01).unwrap();
        let w = store.value("w").data()[0];
        assert!((w + 0.01).abs() < 1e-7, "w = {w}");
    }

    #[test]
    fn two_steps_match_hand_trace() {
        // hand-evaluated Adam recurrence on a scalar with constant grad
        let g = 2.0;
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        let mut w_ref = 1.0;
        let mut m = 0.0;
        let mut v = 0.0;
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1_pow(b1, t));
            let vh = v / (1.0 - b1_pow(b2, t));
            w_ref -= lr * mh / (vh.sqrt() + eps);
        }

        let mut store = scalar_store(1.0, g);
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, lr).unwrap();
        store.get_mut("w").unwrap().grad.data_mut()[0] = g;
        adam_step(&mut store, &mut st, lr).unwrap();
        assert!((store.value("w").data()[0] - w_ref).abs() < 1e-15);
    }

    fn b1_pow(b: f64, t: usize) -> f64 {
        b.powi(t as i32)
    }

    #[test]
    fn non_finite_grad_names_the_param() {
        let mut store = scalar_store(0.0, f64::NAN);
        let mut st = AdamState::new(&store);
        match adam_step(&mut store, &mut st, 0.1) {
            Err(Error::Numerical { param, .. }) => assert_eq!(param, "w"),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }
}
