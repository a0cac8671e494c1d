//! LAMB and AdamW optimizers over named parameter stores.
//!
//! Both share one update kernel: Adam moments with bias correction, then
//! `r = m̂/(√v̂+ε) + wd·w`. AdamW applies `w -= lr·r` directly; LAMB scales
//! the step by the per-tensor trust ratio `‖w‖ / ‖r‖` (1 when either norm is
//! zero, optionally clamped). Because the kernel is shared, LAMB with the
//! trust ratio pinned to 1 and zero weight decay reproduces AdamW exactly,
//! bit for bit.
//!
//! "Per-layer" granularity is per named tensor: every entry in the
//! [`ParamStore`] gets its own trust ratio.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Arr;

/// Hyperparameters shared by LAMB and AdamW (`trust_clip` is LAMB-only).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LambHyper {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub trust_clip: Option<(f64, f64)>,
    /// Weight decay applies only to parameters with at least this many axes;
    /// 0 decays everything. Training configs use 2 so biases, norm gains, and
    /// the logit scale stay decay-free.
    pub decay_min_ndim: usize,
}

impl Default for LambHyper {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            eps: 1e-8,
            trust_clip: None,
            decay_min_ndim: 0,
        }
    }
}

impl LambHyper {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return Err(Error::config(format!("betas {:?} outside (0,1)", self.betas)));
        }
        Ok(())
    }
}

/// First/second moments per parameter plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
    step: u64,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Drops the moments of one parameter, e.g. after its shape changed when
    /// positional tables were resampled for a new resolution.
    pub fn reset_param(&mut self, name: &str) {
        self.m.remove(name);
        self.v.remove(name);
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Adamw,
    Lamb,
}

fn step_impl(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Arr>,
    state: &mut OptState,
    hyper: &LambHyper,
    mode: Mode,
) -> Result<()> {
    hyper.validate()?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = hyper.betas;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (name, grad) in grads {
        let w = params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("gradient for unknown parameter {name:?}")))?;
        if w.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "parameter {name:?} is {:?} but gradient is {:?}",
                w.shape(),
                grad.shape()
            )));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Arr::zeros(w.raw_dim()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Arr::zeros(w.raw_dim()));
        if m.shape() != w.shape() || v.shape() != w.shape() {
            return Err(Error::shape(format!("optimizer state for {name:?} has stale shape")));
        }
        ndarray::Zip::from(&mut *m).and(grad).for_each(|mi, &gi| *mi = b1 * *mi + (1.0 - b1) * gi);
        ndarray::Zip::from(&mut *v)
            .and(grad)
            .for_each(|vi, &gi| *vi = b2 * *vi + (1.0 - b2) * gi * gi);
        // r = m̂/(√v̂+ε) + wd·w
        let wd = if w.ndim() >= hyper.decay_min_ndim { hyper.weight_decay } else { 0.0 };
        let mut update = Arr::zeros(w.raw_dim());
        ndarray::Zip::from(&mut update).and(&*m).and(&*v).and(&*w).for_each(|u, &mi, &vi, &wi| {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *u = mhat / (vhat.sqrt() + hyper.eps) + wd * wi;
        });
        let ratio = match mode {
            Mode::Adamw => 1.0,
            Mode::Lamb => {
                let wn = l2(w);
                let un = l2(&update);
                let mut r = if wn == 0.0 || un == 0.0 { 1.0 } else { wn / un };
                if let Some((lo, hi)) = hyper.trust_clip {
                    r = r.clamp(lo, hi);
                }
                r
            }
        };
        let step_scale = hyper.lr * ratio;
        ndarray::Zip::from(&mut *w).and(&update).for_each(|wi, &u| *wi -= step_scale * u);
    }
    Ok(())
}

fn l2(a: &Arr) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One LAMB step. Parameters without gradients are untouched (their moments
/// do not decay either).
pub fn lamb_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Arr>,
    state: &mut OptState,
    hyper: &LambHyper,
) -> Result<()> {
    step_impl(params, grads, state, hyper, Mode::Lamb)
}

/// One AdamW step (decoupled weight decay, no trust scaling).
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Arr>,
    state: &mut OptState,
    hyper: &LambHyper,
) -> Result<()> {
    step_impl(params, grads, state, hyper, Mode::Adamw)
}

/// Linear warmup, then cosine interpolation toward `base·final_factor`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Fraction of `base_lr` reached at the final step (1.0 = constant after
    /// warmup).
    pub final_factor: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.final_factor >= 1.0 || self.total_steps <= self.warmup_steps {
            return self.base_lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let p = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.base_lr * (self.final_factor + (1.0 - self.final_factor) * cos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Arr::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut params = store_with("w", &[0.3, -0.7]);
        let before = params.get("w").unwrap().clone();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Arr::zeros(IxDyn(&[2])));
        let mut state = OptState::new();
        let hyper = LambHyper { weight_decay: 0.0, ..Default::default() };
        lamb_step(&mut params, &grads, &mut state, &hyper).unwrap();
        assert_eq!(params.get("w").unwrap(), &before);
    }

    #[test]
    fn scalar_step_matches_hand_oracle() {
        // single scalar parameter, defaults lr=2e-3, betas=(0.9,0.95), wd=0.05
        let w0 = 0.5;
        let g0 = 0.2;
        let hyper = LambHyper::default();
        let mut params = store_with("w", &[w0]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Arr::from_shape_vec(IxDyn(&[1]), vec![g0]).unwrap());
        let mut state = OptState::new();
        lamb_step(&mut params, &grads, &mut state, &hyper).unwrap();

        // straight-line oracle
        let m = 0.1 * g0;
        let v = 0.05 * g0 * g0;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.95);
        let r = mhat / (vhat.sqrt() + hyper.eps) + 0.05 * w0;
        let trust = w0.abs() / r.abs();
        let expect = w0 - 2e-3 * trust * r;
        assert_abs_diff_eq!(params.get("w").unwrap()[[0]], expect, epsilon = 1e-8);
    }

    #[test]
    fn trust_ratio_one_reduces_to_adamw_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let values: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut lamb_params = store_with("w", &values);
        let mut adam_params = store_with("w", &values);
        let mut lamb_state = OptState::new();
        let mut adam_state = OptState::new();
        // pin the ratio at exactly 1 via the clip; zero weight decay
        let lamb_hyper = LambHyper { weight_decay: 0.0, trust_clip: Some((1.0, 1.0)), ..Default::default() };
        let adam_hyper = LambHyper { weight_decay: 0.0, trust_clip: None, ..Default::default() };
        for step in 0..5 {
            let g: Vec<f64> = (0..16).map(|i| ((step * 16 + i) as f64 * 0.37).sin()).collect();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Arr::from_shape_vec(IxDyn(&[16]), g).unwrap());
            lamb_step(&mut lamb_params, &grads, &mut lamb_state, &lamb_hyper).unwrap();
            adamw_step(&mut adam_params, &grads, &mut adam_state, &adam_hyper).unwrap();
            assert_eq!(lamb_params.get("w").unwrap(), adam_params.get("w").unwrap(), "diverged at step {step}");
        }
    }

    #[test]
    fn zero_norm_parameter_gets_ratio_one() {
        // fresh zero parameter: ‖w‖ = 0 ⇒ ratio 1 ⇒ identical to AdamW step
        let mut a = store_with("w", &[0.0, 0.0]);
        let mut b = store_with("w", &[0.0, 0.0]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Arr::from_shape_vec(IxDyn(&[2]), vec![0.3, -0.4]).unwrap());
        let hyper = LambHyper { weight_decay: 0.0, ..Default::default() };
        lamb_step(&mut a, &grads, &mut OptState::new(), &hyper).unwrap();
        adamw_step(&mut b, &grads, &mut OptState::new(), &hyper).unwrap();
        assert_eq!(a.get("w").unwrap(), b.get("w").unwrap());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut params = store_with("w", &[1.0, 2.0]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Arr::zeros(IxDyn(&[3])));
        assert!(lamb_step(&mut params, &grads, &mut OptState::new(), &LambHyper::default()).is_err());
    }

    #[test]
    fn warmup_schedule() {
        let s = LrSchedule { base_lr: 1.0, warmup_steps: 10, total_steps: 100, final_factor: 1.0 };
        assert_abs_diff_eq!(s.lr_at(0), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(s.lr_at(9), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.lr_at(50), 1.0, epsilon = 1e-12);
        let c = LrSchedule { base_lr: 1.0, warmup_steps: 10, total_steps: 110, final_factor: 0.0 };
        assert_abs_diff_eq!(c.lr_at(60), 0.5, epsilon = 1e-9); // halfway through decay
        assert_abs_diff_eq!(c.lr_at(109), 0.0, epsilon = 1e-3);
    }

    #[test]
    fn descends_a_quadratic() {
        // sanity: LAMB minimizes f(w) = ‖w − target‖² steadily
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut params = store_with("w", &vec![0.0; 8]);
        let mut state = OptState::new();
        let hyper = LambHyper { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let loss_of = |p: &ParamStore| -> f64 {
            p.get("w").unwrap().iter().zip(&target).map(|(w, t)| (w - t) * (w - t)).sum()
        };
        let initial = loss_of(&params);
        for _ in 0..200 {
            let g: Vec<f64> = params
                .get("w")
                .unwrap()
                .iter()
                .zip(&target)
                .map(|(w, t)| 2.0 * (w - t))
                .collect();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Arr::from_shape_vec(IxDyn(&[8]), g).unwrap());
            lamb_step(&mut params, &grads, &mut state, &hyper).unwrap();
        }
        assert!(loss_of(&params) < initial * 0.01);
    }
}
