//! Training and evaluation of the learned components: the noise-prediction
//! denoiser, the time-conditioned anti-causal classifier, the VAE that supplies
//! latents for CLD, and the autoencoder bank behind IM1/IM2.

mod autoencoder;
mod classifier;
mod denoiser;
mod vae;

pub use autoencoder::{train_autoencoder_bank, AutoencoderBank, AutoencoderConfig, Autoencoder};
pub use classifier::{train_classifier, ClassifierConfig, ClassifierHandle};
pub use denoiser::{train_denoiser, DenoiserConfig, DenoiserHandle, GaussianSkip, LossWeighting};
pub use vae::{train_vae, VaeConfig, VaeHandle};

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{adam_step, ema_update, warmup_ema_rate, AdamConfig, OptimizerState};
use crate::scm::LabeledSample;
use crate::tensor::{ParamSet, TensorGrid};

/// Optimisation budget shared by every model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub ema_rate: f64,
    /// Iterations per loss-curve row.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            ema_rate: 0.9999,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::config("iterations, batch_size and log_every must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return Err(Error::config(format!("EMA rate must lie in [0, 1), got {}", self.ema_rate)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// Mean training loss per logging interval.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub rows: Vec<LossRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    /// Last iteration (1-based) covered by this row.
    pub iteration: usize,
    pub mean_loss: f64,
}

impl LossCurve {
    pub fn first(&self) -> Option<f64> {
        self.rows.first().map(|r| r.mean_loss)
    }

    pub fn last(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mean_loss)
    }
}

/// Stack sample observations into a `(n, d)` matrix.
pub fn stack_observations<'a>(samples: impl IntoIterator<Item = &'a LabeledSample>) -> Result<Array2<f64>> {
    stack_tensors(samples.into_iter().map(|s| &s.x))
}

pub fn stack_tensors<'a>(tensors: impl IntoIterator<Item = &'a TensorGrid>) -> Result<Array2<f64>> {
    let rows: Vec<&TensorGrid> = tensors.into_iter().collect();
    let d = rows.first().map(|t| t.len()).ok_or_else(|| Error::config("no samples"))?;
    let mut out = Array2::zeros((rows.len(), d));
    for (i, t) in rows.iter().enumerate() {
        if t.len() != d {
            return Err(Error::config(format!("sample {i} has {} values, expected {d}", t.len())));
        }
        out.row_mut(i).assign(&ArrayView1::from(t.values()));
    }
    Ok(out)
}

/// Rows of a matrix as one-dimensional tensors.
pub fn unstack(a: &Array2<f64>) -> Result<Vec<TensorGrid>> {
    a.rows().into_iter().map(|r| TensorGrid::vector(r.to_vec())).collect()
}

pub(crate) fn gather_rows(data: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), data.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&data.row(i));
    }
    out
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// One optimisation step: loss and gradients for each parameter set.
pub(crate) type StepOutput = (f64, Vec<ParamSet>);

/// Adam over several parameter sets with an optional EMA shadow of the first set.
pub(crate) fn run_training<F>(
    params: &mut [ParamSet],
    mut ema: Option<&mut ParamSet>,
    cfg: &TrainConfig,
    mut step: F,
) -> Result<LossCurve>
where
    F: FnMut(&[ParamSet], &mut ChaCha8Rng) -> Result<StepOutput>,
{
    cfg.validate()?;
    let adam = cfg.adam();
    let mut states: Vec<OptimizerState> = params.iter().map(OptimizerState::new).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = LossCurve::default();
    let mut window = 0.0;
    let mut window_len = 0usize;
    let mut last_finite = f64::NAN;
    for it in 1..=cfg.iterations {
        let (loss, grads) = step(params, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss at iteration {it} (last finite loss {last_finite})"
            )));
        }
        last_finite = loss;
        for ((p, g), st) in params.iter_mut().zip(&grads).zip(&mut states) {
            adam_step(p, g, st, &adam).map_err(|e| match e {
                Error::Numeric(m) => Error::numeric(format!("{m} at iteration {it} (last finite loss {last_finite})")),
                other => other,
            })?;
        }
        if let Some(shadow) = ema.as_deref_mut() {
            let rate = warmup_ema_rate(cfg.ema_rate, shadow.step_count());
            ema_update(shadow, &params[0], rate)?;
        }
        window += loss;
        window_len += 1;
        if it % cfg.log_every == 0 || it == cfg.iterations {
            curve.rows.push(LossRow {
                iteration: it,
                mean_loss: window / window_len as f64,
            });
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(curve)
}

pub(crate) fn sample_indices(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

pub(crate) fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + row.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
