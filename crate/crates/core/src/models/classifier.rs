use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gather_rows, log_softmax_rows, run_training, sample_indices, standard_normal, LossCurve, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{MlpSpec, Steps};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{ParamSet, TensorGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub train: TrainConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            time_dim: 32,
            train: TrainConfig::default(),
        }
    }
}

/// Time-conditioned anti-causal predictor `p_phi(y | x_t, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHandle {
    pub spec: MlpSpec,
    pub params: ParamSet,
    pub classes: usize,
    pub schedule_fingerprint: u64,
}

impl ClassifierHandle {
    pub fn new(spec: MlpSpec, params: ParamSet, schedule_fingerprint: u64) -> Result<Self> {
        spec.validate()?;
        spec.check_params(&params)?;
        if !spec.is_time_conditioned() {
            return Err(Error::config("the classifier needs a step input"));
        }
        Ok(Self {
            classes: spec.output_dim,
            spec,
            params,
            schedule_fingerprint,
        })
    }

    pub fn check_schedule(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if schedule.fingerprint() != self.schedule_fingerprint || schedule.steps() != self.spec.total_steps {
            return Err(Error::Compatibility(format!(
                "classifier was trained with schedule {:016x}, got {:016x}",
                self.schedule_fingerprint,
                schedule.fingerprint()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x_t: ArrayView2<'_, f64>, steps: Steps<'_>) -> Result<Array2<f64>> {
        self.spec.eval(&self.params, x_t, steps)
    }

    pub fn log_probs(&self, x_t: ArrayView2<'_, f64>, steps: Steps<'_>) -> Result<Array2<f64>> {
        Ok(log_softmax_rows(&self.logits(x_t, steps)?))
    }

    pub fn probabilities(&self, x_t: ArrayView2<'_, f64>, steps: Steps<'_>) -> Result<Array2<f64>> {
        Ok(self.log_probs(x_t, steps)?.mapv(f64::exp))
    }

    pub fn predict(&self, x_t: ArrayView2<'_, f64>, t: usize) -> Result<Vec<usize>> {
        let lp = self.log_probs(x_t, Steps::Shared(t))?;
        Ok(lp.rows().into_iter().map(|r| argmax(r.iter().copied())).collect())
    }

    /// Fraction of rows classified as their label at step `t` (inputs already noised).
    pub fn accuracy(&self, x_t: ArrayView2<'_, f64>, labels: &[usize], t: usize) -> Result<f64> {
        let pred = self.predict(x_t, t)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
    }

    /// `grad_x log p_phi(target_i | x_i, t)` for each row.
    pub fn guidance_gradient_batch(&self, x_t: ArrayView2<'_, f64>, t: usize, targets: &[usize]) -> Result<Array2<f64>> {
        if targets.len() != x_t.nrows() {
            return Err(Error::config(format!("{} targets for {} rows", targets.len(), x_t.nrows())));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= self.classes) {
            return Err(Error::config(format!("target {bad} out of range [0, {})", self.classes)));
        }
        let tape = self.spec.forward(&self.params, x_t, Steps::Shared(t))?;
        let lp = log_softmax_rows(tape.output());
        let mut d_out = lp.mapv(|v| -v.exp());
        for (mut row, &y) in d_out.rows_mut().into_iter().zip(targets) {
            row[y] += 1.0;
        }
        tape.input_gradient(&self.params, &d_out)
    }

    pub fn guidance_gradient(&self, x_t: &TensorGrid, t: usize, target: usize) -> Result<TensorGrid> {
        let g = self.guidance_gradient_batch(x_t.as_matrix()?, t, &[target])?;
        TensorGrid::new(x_t.shape().to_vec(), g.into_iter().collect())
    }

    /// Mean cross-entropy and parameter gradients on already-noised inputs.
    pub fn loss_and_grad(
        spec: &MlpSpec,
        params: &ParamSet,
        x_t: &Array2<f64>,
        steps: &[usize],
        labels: &[usize],
    ) -> Result<(f64, ParamSet)> {
        let b = x_t.nrows() as f64;
        let tape = spec.forward(params, x_t.view(), Steps::PerRow(steps))?;
        let lp = log_softmax_rows(tape.output());
        let loss = -labels.iter().enumerate().map(|(i, &y)| lp[[i, y]]).sum::<f64>() / b;
        let mut d_out = lp.mapv(f64::exp);
        for (mut row, &y) in d_out.rows_mut().into_iter().zip(labels) {
            row[y] -= 1.0;
            row /= b;
        }
        Ok((loss, tape.backward(params, &d_out)?.params))
    }

    pub fn quantized(&self) -> Self {
        Self {
            params: self.params.round_to_f32(),
            ..self.clone()
        }
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Cross-entropy on `x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps` with `t` uniform on `[0, T]`.
pub fn train_classifier(
    data: &Array2<f64>,
    labels: &[usize],
    classes: usize,
    schedule: &DiffusionSchedule,
    cfg: &ClassifierConfig,
) -> Result<(ClassifierHandle, LossCurve)> {
    if data.nrows() == 0 || data.nrows() != labels.len() {
        return Err(Error::config("classifier needs a non-empty labelled dataset"));
    }
    if classes < 2 || labels.iter().any(|&y| y >= classes) {
        return Err(Error::config(format!("labels must lie in [0, {classes}) with at least two classes")));
    }
    let d = data.ncols();
    let spec = MlpSpec::new(d, cfg.hidden.clone(), classes).with_time(cfg.time_dim, schedule.steps());
    if cfg.time_dim == 0 {
        return Err(Error::config("the classifier needs a positive time embedding width"));
    }
    let mut params = vec![spec.init(cfg.train.seed)?];
    let curve = run_training(&mut params, None, &cfg.train, |p, rng| {
        let idx = sample_indices(rng, data.nrows(), cfg.train.batch_size);
        let mut x = gather_rows(data, &idx);
        let steps: Vec<usize> = (0..idx.len()).map(|_| rng.random_range(0..=schedule.steps())).collect();
        let eps = standard_normal(rng, idx.len(), d);
        for ((mut row, e), &t) in x.rows_mut().into_iter().zip(eps.rows()).zip(&steps) {
            let a = schedule.alpha_cum(t);
            let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
            row.zip_mut_with(&e, |x, e| *x = sa * *x + sn * e);
        }
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, g) = ClassifierHandle::loss_and_grad(&spec, &p[0], &x, &steps, &y)?;
        Ok((loss, vec![g]))
    })?;
    let handle = ClassifierHandle::new(spec, params.pop().expect("one set"), schedule.fingerprint())?.quantized();
    Ok((handle, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use ndarray::array;

    fn handle() -> ClassifierHandle {
        let spec = MlpSpec::new(3, vec![7, 5], 4).with_time(6, 30);
        ClassifierHandle::new(spec.clone(), spec.init(5).unwrap(), 0).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let h = handle();
        let x = array![[0.3, 20.0, -1.0], [0.0, 0.0, 0.0], [-50.0, 3.0, 9.0]];
        let p = h.probabilities(x.view(), Steps::Shared(12)).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn guidance_gradient_matches_finite_differences() {
        let h = handle();
        let x = TensorGrid::vector(vec![0.4, -1.1, 0.8]).unwrap();
        for target in 0..4 {
            let g = h.guidance_gradient(&x, 9, target).unwrap();
            let err = grad_check(
                |v| Ok(h.log_probs(v.as_matrix()?, Steps::Shared(9))?[[0, target]]),
                &g,
                &x,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err <= 1e-5, "target {target}: {err}");
        }
    }

    #[test]
    fn constant_logits_give_zero_guidance() {
        let mut h = handle();
        for name in ["hidden0.weight", "hidden1.weight", "out.weight"] {
            let shape = h.params.get(name).unwrap().shape().to_vec();
            h.params.set(name, TensorGrid::zeros(&shape)).unwrap();
        }
        let x = TensorGrid::vector(vec![3.0, -2.0, 1.0]).unwrap();
        let g = h.guidance_gradient(&x, 4, 2).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let h = handle();
        let x = array![[0.1, 0.2, 0.3], [1.0, -0.5, 0.0]];
        let steps = [0, 30];
        let labels = [3, 1];
        let (_, g) = ClassifierHandle::loss_and_grad(&h.spec, &h.params, &x, &steps, &labels).unwrap();
        for (i, (name, t)) in h.params.iter().enumerate() {
            let err = grad_check(
                |v| {
                    let mut q = h.params.clone();
                    q.set(name, v.clone())?;
                    Ok(ClassifierHandle::loss_and_grad(&h.spec, &q, &x, &steps, &labels)?.0)
                },
                g.tensor(i),
                t,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err <= 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn rejects_bad_targets() {
        let h = handle();
        let x = array![[0.0, 0.0, 0.0]];
        assert!(h.guidance_gradient_batch(x.view(), 1, &[4]).is_err());
        assert!(h.guidance_gradient_batch(x.view(), 1, &[0, 1]).is_err());
    }
}
