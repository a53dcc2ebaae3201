//! Adam with bias correction and exponential moving averages of parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first_moment: ParamSet,
    second_moment: ParamSet,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.second_moment
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptimizerState, cfg: &AdamConfig) -> Result<()> {
    if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.eps > 0.0) {
        return Err(Error::config(format!("invalid Adam hyperparameters {cfg:?}")));
    }
    params.ensure_compatible(grads)?;
    params.ensure_compatible(&state.first_moment)?;

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads.tensor(i).values();
        let m = state.first_moment.tensor_mut(i).values_mut();
        for (m, g) in m.iter_mut().zip(g) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        }
        let v = state.second_moment.tensor_mut(i).values_mut();
        for (v, g) in v.iter_mut().zip(g) {
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        }
        let m = state.first_moment.tensor(i).values();
        let v = state.second_moment.tensor(i).values();
        let p = params.tensor_mut(i).values_mut();
        for ((p, m), v) in p.iter_mut().zip(m).zip(v) {
            *p -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        }
        if let Some(j) = params.tensor(i).values().iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("Adam produced a non-finite value in tensor {i} at {j}")));
        }
    }
    params.bump_step();
    Ok(())
}

/// `shadow <- rate * shadow + (1 - rate) * params`, element-wise.
pub fn ema_update(shadow: &mut ParamSet, params: &ParamSet, rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("EMA rate must lie in [0, 1), got {rate}")));
    }
    shadow.ensure_compatible(params)?;
    for i in 0..params.len() {
        let p = params.tensor(i).values();
        for (s, p) in shadow.tensor_mut(i).values_mut().iter_mut().zip(p) {
            *s = rate * *s + (1.0 - rate) * p;
        }
    }
    shadow.bump_step();
    Ok(())
}

/// EMA rate with the usual warm-up: `min(rate, (1 + n) / (10 + n))` after `n` updates.
pub fn warmup_ema_rate(rate: f64, updates: u64) -> f64 {
    let n = updates as f64;
    rate.min((1.0 + n) / (10.0 + n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorGrid;
    use proptest::prelude::*;

    fn scalar_set(v: f64) -> ParamSet {
        ParamSet::new(vec![("theta".into(), TensorGrid::scalar(v).unwrap())]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_set(0.3);
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &scalar_set(0.0), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.tensor(0).values(), &[0.3]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3, -4.0, 250.0] {
            let mut p = scalar_set(0.0);
            let mut st = OptimizerState::new(&p);
            let cfg = AdamConfig::default();
            adam_step(&mut p, &scalar_set(g), &mut st, &cfg).unwrap();
            let moved = p.tensor(0).values()[0];
            assert!((moved.abs() - cfg.lr).abs() < 1e-7 * cfg.lr.max(1.0), "g={g} moved={moved}");
            assert!(moved * g < 0.0);
        }
    }

    #[test]
    fn hand_evaluated_step() {
        // m = 0.05, v = 0.00025; m_hat = 0.5, v_hat = 0.25; 1 - 0.001 * 0.5 / (0.5 + 1e-8)
        let mut p = scalar_set(1.0);
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &scalar_set(0.5), &mut st, &AdamConfig::default()).unwrap();
        let expected = 1.0 - 0.001 * 0.5 / (0.5 + 1e-8);
        assert!((p.tensor(0).values()[0] - expected).abs() < 1e-15);
        assert!((p.tensor(0).values()[0] - 0.999).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar_set(1.0);
        let mut st = OptimizerState::new(&p);
        let g = ParamSet::new(vec![("theta".into(), TensorGrid::zeros(&[2]))]).unwrap();
        assert!(matches!(adam_step(&mut p, &g, &mut st, &AdamConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn ema_examples() {
        let p = scalar_set(1.0);
        let mut s = scalar_set(1.0);
        ema_update(&mut s, &p, 0.9).unwrap();
        assert_eq!(s.tensor(0).values(), &[1.0]);

        let mut s = scalar_set(-7.0);
        ema_update(&mut s, &p, 0.0).unwrap();
        assert_eq!(s.tensor(0).values(), &[1.0]);

        let mut s = scalar_set(0.0);
        ema_update(&mut s, &p, 0.9999).unwrap();
        assert!((s.tensor(0).values()[0] - 0.0001).abs() < 1e-15);

        assert!(ema_update(&mut s, &p, 1.0).is_err());
        assert!(ema_update(&mut s, &p, -0.1).is_err());
    }

    #[test]
    fn warmup_rate_caps() {
        assert!((warmup_ema_rate(0.9999, 0) - 0.1).abs() < 1e-15);
        assert_eq!(warmup_ema_rate(0.5, 1_000), 0.5);
    }

    proptest! {
        #[test]
        fn ema_contracts(shadow in prop::collection::vec(-10.0..10.0f64, 4),
                         params in prop::collection::vec(-10.0..10.0f64, 4),
                         rate in 0.0..0.999f64) {
            let p = ParamSet::new(vec![("w".into(), TensorGrid::vector(params.clone()).unwrap())]).unwrap();
            let mut s = ParamSet::new(vec![("w".into(), TensorGrid::vector(shadow.clone()).unwrap())]).unwrap();
            ema_update(&mut s, &p, rate).unwrap();
            for ((new, old), target) in s.tensor(0).values().iter().zip(&shadow).zip(&params) {
                prop_assert!((new - target).abs() <= rate * (old - target).abs() + 1e-12);
            }
        }

        #[test]
        fn second_moment_nonnegative(grads in prop::collection::vec(-100.0..100.0f64, 1..20)) {
            let mut p = scalar_set(0.0);
            let mut st = OptimizerState::new(&p);
            for g in grads {
                adam_step(&mut p, &scalar_set(g), &mut st, &AdamConfig::default()).unwrap();
                prop_assert!(st.second_moment().tensor(0).values()[0] >= 0.0);
            }
        }
    }
}
