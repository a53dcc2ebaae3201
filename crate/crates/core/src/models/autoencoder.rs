use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{gather_rows, run_training, sample_indices, stack_observations, LossCurve, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{MlpSpec, Steps};
use crate::scm::LabeledSample;
use crate::tensor::{ParamSet, TensorGrid};

/// Minimum class size for a per-class autoencoder.
pub const MIN_CLASS_SAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub hidden: usize,
    pub code: usize,
    pub train: TrainConfig,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            code: 16,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl Autoencoder {
    pub fn new(spec: MlpSpec, params: ParamSet) -> Result<Self> {
        spec.check_params(&params)?;
        if spec.input_dim != spec.output_dim {
            return Err(Error::config("autoencoder output must match its input"));
        }
        Ok(Self { spec, params })
    }

    pub fn reconstruct_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.spec.eval(&self.params, x, Steps::None)
    }

    pub fn reconstruct(&self, x: &TensorGrid) -> Result<TensorGrid> {
        let out = self.reconstruct_batch(x.as_matrix()?)?;
        TensorGrid::new(x.shape().to_vec(), out.into_iter().collect())
    }

    /// Mean over rows of the squared reconstruction error.
    pub fn mean_loss(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        let diff = self.reconstruct_batch(x)? - x;
        Ok((&diff * &diff).sum() / x.nrows().max(1) as f64)
    }

    fn loss_and_grad(spec: &MlpSpec, params: &ParamSet, x: &Array2<f64>) -> Result<(f64, ParamSet)> {
        let tape = spec.forward(params, x.view(), Steps::None)?;
        let b = x.nrows() as f64;
        let diff = tape.output() - x;
        let loss = (&diff * &diff).sum() / b;
        let g = tape.backward(params, &(diff * (2.0 / b)))?;
        Ok((loss, g.params))
    }
}

/// One autoencoder per class plus a global one, all with the same architecture and budget.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderBank {
    pub per_class: Vec<Autoencoder>,
    pub global: Autoencoder,
}

impl AutoencoderBank {
    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn class(&self, k: usize) -> Result<&Autoencoder> {
        self.per_class
            .get(k)
            .ok_or_else(|| Error::config(format!("no autoencoder for class {k}")))
    }
}

fn train_one(data: &Array2<f64>, cfg: &AutoencoderConfig, seed: u64) -> Result<(Autoencoder, LossCurve)> {
    let d = data.ncols();
    let spec = MlpSpec::new(d, vec![cfg.hidden, cfg.code, cfg.hidden], d);
    let mut train = cfg.train.clone();
    train.seed = seed;
    let mut params = vec![spec.init(seed)?];
    let curve = run_training(&mut params, None, &train, |p, rng| {
        let idx = sample_indices(rng, data.nrows(), train.batch_size);
        let (loss, g) = Autoencoder::loss_and_grad(&spec, &p[0], &gather_rows(data, &idx))?;
        Ok((loss, vec![g]))
    })?;
    let params = params.pop().expect("one set").round_to_f32();
    Ok((Autoencoder::new(spec, params)?, curve))
}

/// Train `classes` class-specific autoencoders and one on all data. Returns the bank and
/// loss curves in the order (class 0, ..., class K-1, global).
pub fn train_autoencoder_bank(
    samples: &[LabeledSample],
    classes: usize,
    cfg: &AutoencoderConfig,
) -> Result<(AutoencoderBank, Vec<LossCurve>)> {
    if cfg.hidden == 0 || cfg.code == 0 {
        return Err(Error::config("autoencoder widths must be positive"));
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut curves = Vec::with_capacity(classes + 1);
    for k in 0..classes {
        let members: Vec<&LabeledSample> = samples.iter().filter(|s| s.y == k).collect();
        if members.len() < MIN_CLASS_SAMPLES {
            return Err(Error::config(format!(
                "class {k} has {} samples; an autoencoder needs at least {MIN_CLASS_SAMPLES}",
                members.len()
            )));
        }
        let (ae, curve) = train_one(&stack_observations(members)?, cfg, cfg.train.seed.wrapping_add(k as u64))?;
        per_class.push(ae);
        curves.push(curve);
    }
    let (global, curve) = train_one(&stack_observations(samples)?, cfg, cfg.train.seed.wrapping_add(classes as u64))?;
    curves.push(curve);
    Ok((AutoencoderBank { per_class, global }, curves))
}
