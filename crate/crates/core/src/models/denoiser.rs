use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gather_rows, run_training, sample_indices, standard_normal, LossCurve, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{MlpSpec, Steps};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{ParamSet, TensorGrid};

/// Per-step weight of the noise-prediction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    /// `(1 - a_t) * ||eps_theta - eps||^2`
    #[default]
    Weighted,
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub weighting: LossWeighting,
    /// Add a [`GaussianSkip`] fitted to the training data so the network only learns a residual.
    pub skip: bool,
    pub train: TrainConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            time_dim: 32,
            weighting: LossWeighting::Weighted,
            skip: true,
            train: TrainConfig::default(),
        }
    }
}

/// Smallest per-coordinate variance used by [`GaussianSkip::fit`].
pub const SKIP_VAR_FLOOR: f64 = 1e-6;

/// Noise estimate that is exact for data distributed as a diagonal Gaussian:
/// `sqrt(1 - a_t) (x_t - sqrt(a_t) mean) / (a_t var + 1 - a_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSkip {
    pub alpha_cum: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianSkip {
    pub fn new(alpha_cum: Vec<f64>, mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() || mean.is_empty() || alpha_cum.is_empty() {
            return Err(Error::config("skip statistics need matching non-empty mean and variance"));
        }
        if mean.iter().chain(&alpha_cum).any(|v| !v.is_finite()) || var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config("skip statistics must be finite with positive variance"));
        }
        if alpha_cum.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::config("cumulative alphas must lie in [0, 1]"));
        }
        Ok(Self { alpha_cum, mean, var })
    }

    /// Per-coordinate mean and (floored) variance of `data`, rounded to `f32`.
    pub fn fit(data: &Array2<f64>, schedule: &DiffusionSchedule) -> Result<Self> {
        let f32_round = |v: f64| v as f32 as f64;
        let mean = data.mean_axis(Axis(0)).ok_or_else(|| Error::config("cannot fit skip statistics to no data"))?;
        let var = data.var_axis(Axis(0), 0.0);
        Self::new(
            (0..=schedule.steps()).map(|t| f32_round(schedule.alpha_cum(t))).collect(),
            mean.iter().map(|&m| f32_round(m)).collect(),
            var.iter().map(|&v| f32_round(v.max(SKIP_VAR_FLOOR))).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn steps(&self) -> usize {
        self.alpha_cum.len() - 1
    }

    fn add_row(&self, mut out: ArrayViewMut1<'_, f64>, x: ArrayView1<'_, f64>, t: usize) {
        let a = self.alpha_cum[t];
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        for (((o, &x), &m), &v) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.var) {
            *o += sn * (x - sa * m) / (a * v + 1.0 - a);
        }
    }

    fn add_rows(&self, out: &mut Array2<f64>, x_t: ArrayView2<'_, f64>, step_of_row: impl Fn(usize) -> usize) {
        for (i, (row, x)) in out.rows_mut().into_iter().zip(x_t.rows()).enumerate() {
            self.add_row(row, x, step_of_row(i));
        }
    }
}

/// Trained noise predictor with raw and EMA parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserHandle {
    pub spec: MlpSpec,
    pub params: ParamSet,
    pub ema_params: ParamSet,
    /// `eps_theta(x, t) = skip(x, t) + net(x, t)` when present.
    pub skip: Option<GaussianSkip>,
    pub schedule_fingerprint: u64,
}

impl DenoiserHandle {
    pub fn new(spec: MlpSpec, params: ParamSet, ema_params: ParamSet, skip: Option<GaussianSkip>, schedule_fingerprint: u64) -> Result<Self> {
        spec.validate()?;
        spec.check_params(&params)?;
        spec.check_params(&ema_params)?;
        if spec.input_dim != spec.output_dim || !spec.is_time_conditioned() {
            return Err(Error::config("a denoiser maps observations to same-shaped noise and needs a step input"));
        }
        if let Some(sk) = &skip {
            if sk.dim() != spec.input_dim || sk.steps() != spec.total_steps {
                return Err(Error::config(format!(
                    "skip statistics cover {} coordinates over {} steps, network has {} over {}",
                    sk.dim(),
                    sk.steps(),
                    spec.input_dim,
                    spec.total_steps
                )));
            }
        }
        Ok(Self {
            spec,
            params,
            ema_params,
            skip,
            schedule_fingerprint,
        })
    }

    pub fn check_schedule(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if schedule.fingerprint() != self.schedule_fingerprint || schedule.steps() != self.spec.total_steps {
            return Err(Error::Compatibility(format!(
                "denoiser was trained with schedule {:016x}, got {:016x}",
                self.schedule_fingerprint,
                schedule.fingerprint()
            )));
        }
        Ok(())
    }

    fn weights(&self, use_ema: bool) -> &ParamSet {
        if use_ema {
            &self.ema_params
        } else {
            &self.params
        }
    }

    /// Noise estimate for a batch of rows sharing step `t`.
    pub fn eval_batch(&self, x_t: ArrayView2<'_, f64>, t: usize, use_ema: bool) -> Result<Array2<f64>> {
        let mut out = self.spec.eval(self.weights(use_ema), x_t, Steps::Shared(t))?;
        if let Some(sk) = &self.skip {
            sk.add_rows(&mut out, x_t, |_| t);
        }
        Ok(out)
    }

    pub fn eval_rows(&self, x_t: ArrayView2<'_, f64>, steps: &[usize], use_ema: bool) -> Result<Array2<f64>> {
        let mut out = self.spec.eval(self.weights(use_ema), x_t, Steps::PerRow(steps))?;
        if let Some(sk) = &self.skip {
            sk.add_rows(&mut out, x_t, |i| steps[i]);
        }
        Ok(out)
    }

    /// Single-observation noise estimate, checked against the schedule it was trained with.
    pub fn denoise_eval(&self, schedule: &DiffusionSchedule, x_t: &TensorGrid, t: usize, use_ema: bool) -> Result<TensorGrid> {
        self.check_schedule(schedule)?;
        schedule.check_step(t)?;
        let out = self.eval_batch(x_t.as_matrix()?, t, use_ema)?;
        TensorGrid::new(x_t.shape().to_vec(), out.into_iter().collect())
    }

    /// Loss of one batch and its parameter gradients, for the given noised draws.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad(
        spec: &MlpSpec,
        params: &ParamSet,
        schedule: &DiffusionSchedule,
        skip: Option<&GaussianSkip>,
        x0: &Array2<f64>,
        steps: &[usize],
        eps: &Array2<f64>,
        weighting: LossWeighting,
    ) -> Result<(f64, ParamSet)> {
        let b = x0.nrows() as f64;
        let (x_t, weights) = noised_batch(schedule, x0, steps, eps, weighting);
        let tape = spec.forward(params, x_t.view(), Steps::PerRow(steps))?;
        let mut diff = tape.output() - eps;
        if let Some(sk) = skip {
            sk.add_rows(&mut diff, x_t.view(), |i| steps[i]);
        }
        let per_row = (&diff * &diff).sum_axis(Axis(1));
        let loss = per_row.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>() / b;
        for (mut row, w) in diff.rows_mut().into_iter().zip(&weights) {
            row *= 2.0 * w / b;
        }
        let grads = tape.backward(params, &diff)?;
        Ok((loss, grads.params))
    }

    /// Quantise both parameter sets to `f32` so the handle equals its on-disk form.
    pub fn quantized(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            params: self.params.round_to_f32(),
            ema_params: self.ema_params.round_to_f32(),
            skip: self.skip.as_ref().map(|sk| GaussianSkip {
                alpha_cum: sk.alpha_cum.iter().map(|&v| v as f32 as f64).collect(),
                mean: sk.mean.iter().map(|&v| v as f32 as f64).collect(),
                var: sk.var.iter().map(|&v| v as f32 as f64).collect(),
            }),
            schedule_fingerprint: self.schedule_fingerprint,
        }
    }
}

fn noised_batch(
    schedule: &DiffusionSchedule,
    x0: &Array2<f64>,
    steps: &[usize],
    eps: &Array2<f64>,
    weighting: LossWeighting,
) -> (Array2<f64>, Vec<f64>) {
    let mut x_t = x0.clone();
    let mut weights = Vec::with_capacity(steps.len());
    for ((mut row, e), &t) in x_t.rows_mut().into_iter().zip(eps.rows()).zip(steps) {
        let a = schedule.alpha_cum(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        row.zip_mut_with(&e, |x, e| *x = sa * *x + sn * e);
        weights.push(match weighting {
            LossWeighting::Weighted => 1.0 - a,
            LossWeighting::Unweighted => 1.0,
        });
    }
    (x_t, weights)
}

/// Fit `eps_theta(sqrt(a_t) x0 + sqrt(1 - a_t) eps, t)` to `eps` with `t` uniform on `[1, T]`.
pub fn train_denoiser(data: &Array2<f64>, schedule: &DiffusionSchedule, cfg: &DenoiserConfig) -> Result<(DenoiserHandle, LossCurve)> {
    if data.nrows() == 0 {
        return Err(Error::config("cannot train a denoiser on an empty dataset"));
    }
    let d = data.ncols();
    let spec = MlpSpec::new(d, cfg.hidden.clone(), d).with_time(cfg.time_dim, schedule.steps());
    if cfg.time_dim == 0 {
        return Err(Error::config("the denoiser needs a positive time embedding width"));
    }
    let init = spec.init(cfg.train.seed)?;
    let mut ema = init.clone();
    let mut params = vec![init];
    let weighting = cfg.weighting;
    let skip = if cfg.skip { Some(GaussianSkip::fit(data, schedule)?) } else { None };
    let curve = run_training(&mut params, Some(&mut ema), &cfg.train, |p, rng| {
        let idx = sample_indices(rng, data.nrows(), cfg.train.batch_size);
        let x0 = gather_rows(data, &idx);
        let steps: Vec<usize> = (0..idx.len()).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let eps = standard_normal(rng, idx.len(), d);
        let (loss, g) = DenoiserHandle::loss_and_grad(&spec, &p[0], schedule, skip.as_ref(), &x0, &steps, &eps, weighting)?;
        Ok((loss, vec![g]))
    })?;
    let params = params.pop().expect("one parameter set");
    let handle = DenoiserHandle::new(spec, params, ema, skip, schedule.fingerprint())?.quantized();
    Ok((handle, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use ndarray::array;

    fn tiny_config(iterations: usize) -> DenoiserConfig {
        DenoiserConfig {
            hidden: vec![16, 16],
            time_dim: 8,
            weighting: LossWeighting::Weighted,
            skip: true,
            train: TrainConfig {
                iterations,
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn zero_network_loss_is_weighted_noise_energy() {
        let sch = DiffusionSchedule::linear(50, 1e-3, 0.05).unwrap();
        let spec = MlpSpec::new(3, vec![4], 3).with_time(4, 50);
        let mut p = spec.init(0).unwrap();
        p.set("out.weight", TensorGrid::zeros(&[3, 4])).unwrap();
        p.set("out.bias", TensorGrid::zeros(&[3])).unwrap();
        let x0 = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let eps = array![[0.5, -1.0, 2.0], [0.0, 1.5, -0.3]];
        let steps = [7, 31];
        let (loss, _) = DenoiserHandle::loss_and_grad(&spec, &p, &sch, None, &x0, &steps, &eps, LossWeighting::Weighted).unwrap();
        let expected = ((1.0 - sch.alpha_cum(7)) * 5.25 + (1.0 - sch.alpha_cum(31)) * 2.34) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let sch = DiffusionSchedule::linear(40, 1e-3, 0.05).unwrap();
        let spec = MlpSpec::new(2, vec![6, 5], 2).with_time(4, 40);
        let p = spec.init(11).unwrap();
        let x0 = array![[0.3, -0.8], [1.2, 0.4], [-0.5, 0.9]];
        let eps = array![[0.2, 1.1], [-0.7, 0.3], [0.05, -1.4]];
        let steps = [3, 17, 40];
        let skip = GaussianSkip::fit(&x0, &sch).unwrap();
        let (_, g) = DenoiserHandle::loss_and_grad(&spec, &p, &sch, Some(&skip), &x0, &steps, &eps, LossWeighting::Weighted).unwrap();
        for (i, (name, t)) in p.iter().enumerate() {
            let analytic = g.tensor(i).clone();
            let err = grad_check(
                |v| {
                    let mut q = p.clone();
                    q.set(name, v.clone())?;
                    Ok(DenoiserHandle::loss_and_grad(&spec, &q, &sch, Some(&skip), &x0, &steps, &eps, LossWeighting::Weighted)?.0)
                },
                &analytic,
                t,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err <= 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn gaussian_skip_is_the_posterior_noise_mean() {
        let sch = DiffusionSchedule::linear(30, 1e-3, 0.1).unwrap();
        let spec = MlpSpec::new(2, vec![4], 2).with_time(4, 30);
        let mut p = spec.init(0).unwrap();
        p.set("out.weight", TensorGrid::zeros(&[2, 4])).unwrap();
        p.set("out.bias", TensorGrid::zeros(&[2])).unwrap();
        let (mean, var) = ([0.5, -1.0], [0.04, 2.0]);
        let alpha_cum: Vec<f64> = (0..=30).map(|t| sch.alpha_cum(t)).collect();
        let skip = GaussianSkip::new(alpha_cum, mean.to_vec(), var.to_vec()).unwrap();
        let h = DenoiserHandle::new(spec, p.clone(), p, Some(skip), sch.fingerprint()).unwrap();
        let x = array![[0.3, 0.7], [-2.0, 1.5]];
        for t in [1, 12, 30] {
            let a = sch.alpha_cum(t);
            let out = h.eval_batch(x.view(), t, true).unwrap();
            for ((o, &xv), j) in out.iter().zip(x.iter()).zip([0, 1, 0, 1]) {
                let x0 = mean[j] + a.sqrt() * var[j] * (xv - a.sqrt() * mean[j]) / (a * var[j] + 1.0 - a);
                let eps = (xv - a.sqrt() * x0) / (1.0 - a).sqrt();
                assert!((o - eps).abs() < 1e-12, "t={t}: {o} vs {eps}");
            }
        }
    }

    #[test]
    fn skip_statistics_must_match_the_network() {
        let spec = MlpSpec::new(2, vec![4], 2).with_time(4, 10);
        let p = spec.init(0).unwrap();
        let wrong_dim = GaussianSkip::new(vec![0.5; 11], vec![0.0; 3], vec![1.0; 3]).unwrap();
        assert!(DenoiserHandle::new(spec.clone(), p.clone(), p.clone(), Some(wrong_dim), 0).is_err());
        let wrong_steps = GaussianSkip::new(vec![0.5; 12], vec![0.0; 2], vec![1.0; 2]).unwrap();
        assert!(DenoiserHandle::new(spec, p.clone(), p, Some(wrong_steps), 0).is_err());
        assert!(GaussianSkip::new(vec![0.5], vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn schedule_mismatch_is_compatibility_error() {
        let data = array![[0.0, 1.0], [1.0, 0.0]];
        let sch = DiffusionSchedule::linear(20, 1e-3, 0.05).unwrap();
        let (h, _) = train_denoiser(&data, &sch, &tiny_config(5)).unwrap();
        let other = DiffusionSchedule::linear(20, 1e-3, 0.06).unwrap();
        let x = TensorGrid::vector(vec![0.1, 0.2]).unwrap();
        assert!(matches!(h.denoise_eval(&other, &x, 3, true), Err(Error::Compatibility(_))));
        let a = h.denoise_eval(&sch, &x, 3, true).unwrap();
        assert_eq!(a, h.denoise_eval(&sch, &x, 3, true).unwrap());
        let raw = h.denoise_eval(&sch, &x, 3, false).unwrap();
        assert!(raw.values().iter().all(|v| v.is_finite()));
        assert_ne!(a, raw);
    }

    #[test]
    fn training_is_deterministic() {
        let data = array![[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]];
        let sch = DiffusionSchedule::linear(20, 1e-3, 0.05).unwrap();
        let (a, ca) = train_denoiser(&data, &sch, &tiny_config(30)).unwrap();
        let (b, cb) = train_denoiser(&data, &sch, &tiny_config(30)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert!(train_denoiser(&Array2::zeros((0, 2)), &sch, &tiny_config(3)).is_err());
    }
}
