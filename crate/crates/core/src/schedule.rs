//! Variance schedule and the closed-form forward (noising) process.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::TensorGrid;

/// Linear beta schedule with cumulative products indexed so that step 0 is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    betas: Vec<f64>,
    alphas_cum: Vec<f64>,
}

impl DiffusionSchedule {
    /// `steps` betas linearly spaced on `[beta_min, beta_max]`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|j| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * j as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alphas_cum = Vec::with_capacity(steps + 1);
        alphas_cum.push(1.0);
        for b in &betas {
            let prev = *alphas_cum.last().expect("non-empty");
            alphas_cum.push(prev * (1.0 - b));
        }
        Ok(Self {
            steps,
            beta_min,
            beta_max,
            betas,
            alphas_cum,
        })
    }

    /// 1000 steps on `[1e-4, 0.02]`.
    pub fn default_profile() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid constants")
    }

    /// 200 steps for fast experiments.
    pub fn short_profile() -> Self {
        Self::linear(200, 1e-4, 0.02 * 5.0).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cum(&self) -> &[f64] {
        &self.alphas_cum
    }

    /// Cumulative signal fraction at step `t` (`1` at `t = 0`).
    pub fn alpha_cum(&self, t: usize) -> f64 {
        self.alphas_cum[t]
    }

    /// Beta applied on the transition into step `t`, for `t >= 1`.
    pub fn beta_into(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::config(format!("step {t} outside [0, {}]", self.steps)))
        } else {
            Ok(())
        }
    }

    /// Stable identifier of the schedule parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"linear");
        h.update((self.steps as u64).to_le_bytes());
        h.update(self.beta_min.to_le_bytes());
        h.update(self.beta_max.to_le_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    /// `x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps`.
    pub fn forward_noise(&self, x0: &TensorGrid, t: usize, eps: &TensorGrid) -> Result<TensorGrid> {
        x0.ensure_same_shape(eps, "noise")?;
        self.check_step(t)?;
        let a = self.alpha_cum(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let values = x0.values().iter().zip(eps.values()).map(|(x, e)| sa * x + sn * e).collect();
        TensorGrid::new(x0.shape().to_vec(), values)
    }

    /// Coefficients `(scale, variance)` of `q(x_t | x_s) = N(scale * x_s, variance)` for `s <= t`.
    pub fn transition(&self, s: usize, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        if s > t {
            return Err(Error::config(format!("transition needs s <= t, got {s} > {t}")));
        }
        let r = self.alpha_cum(t) / self.alpha_cum(s);
        Ok((r.sqrt(), 1.0 - r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_betas() {
        let s = DiffusionSchedule::linear(3, 0.1, 0.1).unwrap();
        let expected = [1.0, 0.9, 0.81, 0.729];
        for (a, b) in s.alphas_cum().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tiny_betas_keep_signal() {
        let s = DiffusionSchedule::linear(10, 1e-15, 1e-15).unwrap();
        assert!(s.alphas_cum().iter().all(|&a| (a - 1.0).abs() < 1e-13));
    }

    #[test]
    fn default_terminal_signal_is_small() {
        let s = DiffusionSchedule::default_profile();
        assert!(s.alpha_cum(1000) < 5e-5);
        assert!(s.alpha_cum(1000) > 0.0);
    }

    #[test]
    fn short_profile_is_near_gaussian_at_the_end() {
        let s = DiffusionSchedule::short_profile();
        assert_eq!(s.steps(), 200);
        assert!(s.alpha_cum(200) < 5e-5);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(DiffusionSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::linear(5, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::linear(5, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::linear(5, 0.1, 1.0).is_err());
    }

    #[test]
    fn strictly_decreasing_and_exact_recurrence() {
        let s = DiffusionSchedule::default_profile();
        for t in 1..=s.steps() {
            assert!(s.alpha_cum(t) < s.alpha_cum(t - 1));
            assert_eq!(s.alpha_cum(t), s.alpha_cum(t - 1) * (1.0 - s.beta_into(t)));
        }
    }

    #[test]
    fn forward_noise_edge_cases() {
        let s = DiffusionSchedule::default_profile();
        let x0 = TensorGrid::vector(vec![1.5, -2.0]).unwrap();
        let eps = TensorGrid::vector(vec![0.3, 0.7]).unwrap();
        assert_eq!(s.forward_noise(&x0, 0, &eps).unwrap(), x0);

        let zero = TensorGrid::zeros(&[2]);
        let xt = s.forward_noise(&zero, 400, &eps).unwrap();
        let k = (1.0 - s.alpha_cum(400)).sqrt();
        assert_eq!(xt.values(), &[k * 0.3, k * 0.7]);

        assert!(s.forward_noise(&x0, 0, &TensorGrid::zeros(&[3])).is_err());
        assert!(s.forward_noise(&x0, 1001, &eps).is_err());
    }

    #[test]
    fn composition_matches_direct_marginal() {
        let sch = DiffusionSchedule::default_profile();
        for (s, t) in [(0, 10), (10, 500), (250, 1000), (999, 1000)] {
            let (scale_s, var_s) = (sch.alpha_cum(s).sqrt(), 1.0 - sch.alpha_cum(s));
            let (k, v) = sch.transition(s, t).unwrap();
            let scale = k * scale_s;
            let var = k * k * var_s + v;
            assert!((scale - sch.alpha_cum(t).sqrt()).abs() < 1e-14);
            assert!((var - (1.0 - sch.alpha_cum(t))).abs() < 1e-14);
        }
    }

    #[test]
    fn fingerprint_distinguishes_profiles() {
        assert_eq!(
            DiffusionSchedule::default_profile().fingerprint(),
            DiffusionSchedule::default_profile().fingerprint()
        );
        assert_ne!(
            DiffusionSchedule::default_profile().fingerprint(),
            DiffusionSchedule::short_profile().fingerprint()
        );
    }
}
