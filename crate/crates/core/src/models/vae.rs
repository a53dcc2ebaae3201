use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{gather_rows, run_training, sample_indices, standard_normal, LossCurve, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::GaussianLatent;
use crate::nn::{MlpSpec, Steps};
use crate::tensor::{ParamSet, TensorGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    /// Variance of the Gaussian likelihood `p(x | z)`.
    pub obs_variance: f64,
    pub train: TrainConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 20,
            hidden: 128,
            obs_variance: 0.01,
            train: TrainConfig::default(),
        }
    }
}

/// Encoder emits `(mu, log sigma^2)`; decoder maps a latent back to an observation.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeHandle {
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
    pub encoder_params: ParamSet,
    pub decoder_params: ParamSet,
    pub latent_dim: usize,
    pub obs_variance: f64,
}

impl VaeHandle {
    pub fn new(
        encoder: MlpSpec,
        decoder: MlpSpec,
        encoder_params: ParamSet,
        decoder_params: ParamSet,
        obs_variance: f64,
    ) -> Result<Self> {
        encoder.check_params(&encoder_params)?;
        decoder.check_params(&decoder_params)?;
        let latent_dim = decoder.input_dim;
        if encoder.output_dim != 2 * latent_dim || decoder.output_dim != encoder.input_dim {
            return Err(Error::config("encoder and decoder shapes do not mirror each other"));
        }
        if !(obs_variance > 0.0) {
            return Err(Error::config("observation variance must be positive"));
        }
        Ok(Self {
            encoder,
            decoder,
            encoder_params,
            decoder_params,
            latent_dim,
            obs_variance,
        })
    }

    /// `(mu, log sigma^2)` for every row.
    pub fn encode_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.encoder.eval(&self.encoder_params, x, Steps::None)?;
        let l = self.latent_dim;
        Ok((out.slice(s![.., ..l]).to_owned(), out.slice(s![.., l..]).to_owned()))
    }

    pub fn encode_latents(&self, x: ArrayView2<'_, f64>) -> Result<Vec<GaussianLatent>> {
        let (mu, logvar) = self.encode_batch(x)?;
        mu.rows()
            .into_iter()
            .zip(logvar.rows())
            .map(|(m, lv)| GaussianLatent::new(m.to_vec(), lv.iter().map(|v| (0.5 * v).exp()).collect()))
            .collect()
    }

    pub fn vae_encode(&self, x: &TensorGrid) -> Result<GaussianLatent> {
        Ok(self.encode_latents(x.as_matrix()?)?.remove(0))
    }

    pub fn decode_batch(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.decoder.eval(&self.decoder_params, z, Steps::None)
    }

    /// Mean squared reconstruction error per row through the posterior mean.
    pub fn reconstruction_error(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        let (mu, _) = self.encode_batch(x)?;
        let rec = self.decode_batch(mu.view())?;
        let diff = rec - x;
        Ok((&diff * &diff).sum() / x.nrows() as f64)
    }

    pub fn quantized(&self) -> Self {
        Self {
            encoder_params: self.encoder_params.round_to_f32(),
            decoder_params: self.decoder_params.round_to_f32(),
            ..self.clone()
        }
    }

    /// Negative ELBO (per row, averaged) and gradients for fixed reparameterisation noise.
    pub fn loss_and_grad(
        encoder: &MlpSpec,
        decoder: &MlpSpec,
        enc_params: &ParamSet,
        dec_params: &ParamSet,
        obs_variance: f64,
        x: &Array2<f64>,
        noise: &Array2<f64>,
    ) -> Result<(f64, ParamSet, ParamSet)> {
        let b = x.nrows() as f64;
        let l = decoder.input_dim;
        let enc = encoder.forward(enc_params, x.view(), Steps::None)?;
        let mu = enc.output().slice(s![.., ..l]).to_owned();
        let logvar = enc.output().slice(s![.., l..]).to_owned();
        let sigma = logvar.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&sigma * noise);
        let dec = decoder.forward(dec_params, z.view(), Steps::None)?;
        let diff = dec.output() - x;
        let recon = (&diff * &diff).sum() / (2.0 * obs_variance);
        let kl = 0.5 * (&mu * &mu + &sigma * &sigma - &logvar - 1.0).sum();
        let loss = (recon + kl) / b;

        let d_rec = diff / (obs_variance * b);
        let dec_grads = dec.backward(dec_params, &d_rec)?;
        let dz = dec_grads.input;
        let d_mu = &dz + &(&mu / b);
        let d_logvar = &dz * noise * &sigma * 0.5 + (&sigma * &sigma - 1.0) * (0.5 / b);
        let d_enc = ndarray::concatenate(Axis(1), &[d_mu.view(), d_logvar.view()])
            .map_err(|e| Error::config(e.to_string()))?;
        let enc_grads = enc.backward(enc_params, &d_enc)?;
        Ok((loss, enc_grads.params, dec_grads.params))
    }
}

/// Maximise the ELBO with a standard-normal prior and diagonal-Gaussian posterior.
pub fn train_vae(data: &Array2<f64>, cfg: &VaeConfig) -> Result<(VaeHandle, LossCurve)> {
    if data.nrows() == 0 {
        return Err(Error::config("cannot train a VAE on an empty dataset"));
    }
    if cfg.latent_dim == 0 || cfg.hidden == 0 {
        return Err(Error::config("latent_dim and hidden must be positive"));
    }
    let d = data.ncols();
    let encoder = MlpSpec::new(d, vec![cfg.hidden], 2 * cfg.latent_dim);
    let decoder = MlpSpec::new(cfg.latent_dim, vec![cfg.hidden], d);
    let mut params = vec![encoder.init(cfg.train.seed)?, decoder.init(cfg.train.seed.wrapping_add(1))?];
    let curve = run_training(&mut params, None, &cfg.train, |p, rng| {
        let idx = sample_indices(rng, data.nrows(), cfg.train.batch_size);
        let x = gather_rows(data, &idx);
        let noise = standard_normal(rng, idx.len(), cfg.latent_dim);
        let (loss, ge, gd) = VaeHandle::loss_and_grad(&encoder, &decoder, &p[0], &p[1], cfg.obs_variance, &x, &noise)?;
        Ok((loss, vec![ge, gd]))
    })?;
    let dec_params = params.pop().expect("decoder");
    let enc_params = params.pop().expect("encoder");
    let handle = VaeHandle::new(encoder, decoder, enc_params, dec_params, cfg.obs_variance)?.quantized();
    Ok((handle, curve))
}
