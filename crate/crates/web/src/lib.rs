//! Browser demo over the exact two-class mixture: forward noising, counterfactual
//! paths across guidance scales and interventional sampling. All point buffers are
//! flat `[x0, y0, x1, y1, ...]`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

use diffscm::error::{Error, Result};
use diffscm::sampler::{abduct_batch, generate_batch, BatchGuidance, DdimCoefficient, EpsilonSource, GuidanceSource};
use diffscm::schedule::DiffusionSchedule;
use diffscm::scm::{generate_dataset, CausalGraph2, GaussMixSpec};

#[wasm_bindgen]
pub struct Demo {
    spec: GaussMixSpec,
    schedule: DiffusionSchedule,
    points: Vec<f64>,
    labels: Vec<u32>,
}

impl Demo {
    pub fn try_new(separation: f64, steps: usize, n: usize, seed: u64) -> Result<Self> {
        let spec = GaussMixSpec::symmetric(2, 2, separation, 1.0)?;
        let schedule = DiffusionSchedule::linear(steps, 1e-4, (0.02 * 1000.0 / steps.max(1) as f64).min(0.5))?;
        let data = generate_dataset(&CausalGraph2::gauss_mix(spec.clone())?, n, seed)?;
        let points = data.all().flat_map(|s| s.x.values().to_vec()).collect();
        let labels = data.all().map(|s| s.y as u32).collect();
        Ok(Self { spec, schedule, points, labels })
    }

    /// Dataset points pushed to step `t` with fresh noise.
    pub fn try_forward_cloud(&self, t: usize, seed: u64) -> Result<Vec<f64>> {
        self.schedule.check_step(t)?;
        let a = self.schedule.alpha_cum(t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self
            .points
            .iter()
            .map(|&x| {
                let e: f64 = StandardNormal.sample(&mut rng);
                a.sqrt() * x + (1.0 - a).sqrt() * e
            })
            .collect())
    }

    /// Abduct `(x, y)` once, then generate its counterfactual for `target` at every scale.
    /// Returns the latent followed by one point per scale.
    pub fn try_counterfactual_path(&self, x: f64, y: f64, target: usize, scales: &[f64]) -> Result<Vec<f64>> {
        if target >= 2 {
            return Err(Error::config(format!("target {target} out of range")));
        }
        let eps = EpsilonSource::Mixture(&self.spec);
        let x0 = Array2::from_shape_vec((1, 2), vec![x, y]).map_err(|e| Error::config(e.to_string()))?;
        let z = abduct_batch(&eps, &self.schedule, &x0, DdimCoefficient::Corrected)?;
        let tiled = Array2::from_shape_fn((scales.len(), 2), |(_, j)| z[[0, j]]);
        let targets = vec![target; scales.len()];
        let out = self.generate(&tiled, scales, &targets)?;
        Ok(z.iter().chain(out.iter()).copied().collect())
    }

    /// `n` samples under `do(y = target)` from fresh latents.
    pub fn try_intervene(&self, target: usize, scale: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
        if target >= 2 {
            return Err(Error::config(format!("target {target} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_simple_fn((n, 2), || StandardNormal.sample(&mut rng));
        Ok(self.generate(&z, &vec![scale; n], &vec![target; n])?.into_iter().collect())
    }

    fn generate(&self, z: &Array2<f64>, scales: &[f64], targets: &[usize]) -> Result<Array2<f64>> {
        let guidance = BatchGuidance {
            source: GuidanceSource::Mixture(&self.spec),
            scales,
            targets,
        };
        generate_batch(&EpsilonSource::Mixture(&self.spec), Some(guidance), &self.schedule, z, DdimCoefficient::Corrected)
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(separation: f64, steps: usize, n: usize, seed: u64) -> std::result::Result<Demo, JsError> {
        Self::try_new(separation, steps, n, seed).map_err(js)
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.labels.clone()
    }

    pub fn forward_cloud(&self, t: usize, seed: u64) -> std::result::Result<Vec<f64>, JsError> {
        self.try_forward_cloud(t, seed).map_err(js)
    }

    pub fn counterfactual_path(&self, x: f64, y: f64, target: usize, scales: Vec<f64>) -> std::result::Result<Vec<f64>, JsError> {
        self.try_counterfactual_path(x, y, target, &scales).map_err(js)
    }

    pub fn intervene(&self, target: usize, scale: f64, n: usize, seed: u64) -> std::result::Result<Vec<f64>, JsError> {
        self.try_intervene(target, scale, n, seed).map_err(js)
    }
}
