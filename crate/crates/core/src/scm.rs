//! Two-variable structural causal models (class -> observation) with recorded
//! exogenous noise.
//!
//! Each observation is produced by a mechanism `x = f(y, u)`, so the exact
//! counterfactual under `do(y = target)` is `f(target, u)`. Mechanism outputs are
//! rounded to the `f32` grid so that datasets survive the on-disk format unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorGrid;

/// Gaussian class-conditional mechanism: `x = mu_y + L_y u` with `u ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussMixSpec {
    pub prior: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major `d x d` lower-triangular factors with positive diagonal.
    pub factors: Vec<Vec<f64>>,
}

impl GaussMixSpec {
    /// Isotropic components with means spread `separation` apart: on a line for `K = 2`
    /// or `d = 1`, otherwise on a circle in the first two coordinates.
    pub fn symmetric(dim: usize, classes: usize, separation: f64, std: f64) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::config("gauss-mix needs dim >= 1 and at least one class"));
        }
        let means = (0..classes)
            .map(|k| {
                let mut m = vec![0.0; dim];
                if classes == 1 {
                    return m;
                }
                if classes == 2 || dim == 1 {
                    m[0] = separation * (k as f64 - (classes - 1) as f64 / 2.0);
                } else {
                    // chord between neighbours equals `separation`
                    let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
                    let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                    m[0] = radius * angle.cos();
                    m[1] = radius * angle.sin();
                }
                m
            })
            .collect();
        let mut factor = vec![0.0; dim * dim];
        for i in 0..dim {
            factor[i * dim + i] = std;
        }
        let spec = Self {
            prior: vec![1.0 / classes as f64; classes],
            means,
            factors: vec![factor; classes],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        let d = self.dim();
        if k == 0 || d == 0 || d > 16 {
            return Err(Error::config(format!("gauss-mix needs K >= 1 and 1 <= d <= 16, got K={k}, d={d}")));
        }
        validate_prior(&self.prior, k)?;
        if self.factors.len() != k || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::config("every class needs a mean of length d and a d x d factor"));
        }
        for (c, l) in self.factors.iter().enumerate() {
            if l.len() != d * d {
                return Err(Error::config(format!("factor {c} has {} entries, expected {}", l.len(), d * d)));
            }
            for i in 0..d {
                if !(l[i * d + i] > 0.0) {
                    return Err(Error::config(format!("factor {c} has non-positive diagonal at {i}")));
                }
                if (i + 1..d).any(|j| l[i * d + j] != 0.0) {
                    return Err(Error::config(format!("factor {c} is not lower triangular")));
                }
            }
        }
        if self.means.iter().chain(&self.factors).flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric("gauss-mix parameters must be finite"));
        }
        Ok(())
    }

    /// `mu_y + L_y u` in full precision.
    pub fn apply_exact(&self, class: usize, u: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let l = &self.factors[class];
        (0..d)
            .map(|i| self.means[class][i] + (0..=i).map(|j| l[i * d + j] * u[j]).sum::<f64>())
            .collect()
    }

    /// Component covariance `L_y L_y^T`, row-major.
    pub fn covariance(&self, class: usize) -> Vec<f64> {
        let d = self.dim();
        let l = &self.factors[class];
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] = (0..d).map(|k| l[i * d + k] * l[j * d + k]).sum();
            }
        }
        s
    }
}

/// Soft bar images: horizontal bar, vertical bar and cross on a square raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterSpec {
    pub extent: usize,
    pub prior: Vec<f64>,
    /// Standard deviation of the additive pixel noise.
    pub pixel_noise: f64,
    /// Mean bar intensity.
    pub intensity: f64,
}

/// Number of style coordinates at the head of a raster noise vector.
pub const RASTER_STYLE_DIMS: usize = 4;

impl RasterSpec {
    pub const CLASSES: usize = 3;

    pub fn new(extent: usize) -> Result<Self> {
        let spec = Self {
            extent,
            prior: vec![1.0 / 3.0; 3],
            pixel_noise: 0.03,
            intensity: 0.8,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent < 4 {
            return Err(Error::config(format!("raster extent must be at least 4, got {}", self.extent)));
        }
        validate_prior(&self.prior, Self::CLASSES)?;
        if !(self.pixel_noise >= 0.0 && self.pixel_noise.is_finite()) {
            return Err(Error::config("pixel noise must be finite and non-negative"));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(Error::config(format!("bar intensity must lie in (0, 1], got {}", self.intensity)));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.extent * self.extent
    }

    /// Noise-free template for `class` with style `(row, col, width, intensity)`.
    pub fn template(&self, class: usize, style: &[f64; 4]) -> Vec<f64> {
        let [row_c, col_c, width, intensity] = *style;
        let n = self.extent;
        let mut img = vec![0.0; n * n];
        for r in 0..n {
            let hr = (-0.5 * ((r as f64 - row_c) / width).powi(2)).exp();
            for c in 0..n {
                let vc = (-0.5 * ((c as f64 - col_c) / width).powi(2)).exp();
                let v = match class {
                    0 => hr,
                    1 => vc,
                    _ => hr.max(vc),
                };
                img[r * n + c] = intensity * v;
            }
        }
        img
    }

    /// Map the four standard-normal style coordinates to bar geometry.
    pub fn style(&self, u: &[f64]) -> [f64; 4] {
        let centre = (self.extent as f64 - 1.0) / 2.0;
        let span = centre - 2.0;
        [
            centre + span * (0.6 * u[0]).tanh(),
            centre + span * (0.6 * u[1]).tanh(),
            1.2 + 0.4 * u[2].tanh(),
            self.intensity * (1.0 + 0.1875 * u[3].tanh()),
        ]
    }

    pub fn apply_exact(&self, class: usize, u: &[f64]) -> Vec<f64> {
        let style = self.style(u);
        self.template(class, &style)
            .into_iter()
            .zip(&u[RASTER_STYLE_DIMS..])
            .map(|(v, z)| (v + self.pixel_noise * z).clamp(0.0, 1.0))
            .collect()
    }
}

fn validate_prior(prior: &[f64], k: usize) -> Result<()> {
    if prior.len() != k {
        return Err(Error::config(format!("prior has {} weights for {k} classes", prior.len())));
    }
    if prior.iter().any(|&p| !(p > 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("prior weights must be positive and sum to 1"));
    }
    Ok(())
}

/// Mechanism family of the observation node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Mechanism {
    GaussMix(GaussMixSpec),
    ShapeRaster(RasterSpec),
}

/// Family tags used on disk.
impl Mechanism {
    pub fn tag(&self) -> u8 {
        match self {
            Mechanism::GaussMix(_) => 1,
            Mechanism::ShapeRaster(_) => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::GaussMix(_) => "gauss-mix",
            Mechanism::ShapeRaster(_) => "shape-raster",
        }
    }
}

/// Cause `y` (a class) and effect `x` (an observation) with `x := f(y, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph2 {
    pub mechanism: Mechanism,
}

impl CausalGraph2 {
    pub fn gauss_mix(spec: GaussMixSpec) -> Result<Self> {
        spec.validate()?;
        if spec.classes() < 2 {
            return Err(Error::config("a causal graph needs at least two classes"));
        }
        Ok(Self {
            mechanism: Mechanism::GaussMix(spec),
        })
    }

    pub fn shape_raster(spec: RasterSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            mechanism: Mechanism::ShapeRaster(spec),
        })
    }

    pub fn classes(&self) -> usize {
        match &self.mechanism {
            Mechanism::GaussMix(s) => s.classes(),
            Mechanism::ShapeRaster(_) => RasterSpec::CLASSES,
        }
    }

    pub fn prior(&self) -> &[f64] {
        match &self.mechanism {
            Mechanism::GaussMix(s) => &s.prior,
            Mechanism::ShapeRaster(s) => &s.prior,
        }
    }

    /// Flattened observation length.
    pub fn obs_dim(&self) -> usize {
        match &self.mechanism {
            Mechanism::GaussMix(s) => s.dim(),
            Mechanism::ShapeRaster(s) => s.pixels(),
        }
    }

    /// Length of the recorded exogenous noise vector.
    pub fn noise_dim(&self) -> usize {
        match &self.mechanism {
            Mechanism::GaussMix(s) => s.dim(),
            Mechanism::ShapeRaster(s) => RASTER_STYLE_DIMS + s.pixels(),
        }
    }

    /// Side length for raster families.
    pub fn raster_extent(&self) -> Option<usize> {
        match &self.mechanism {
            Mechanism::ShapeRaster(s) => Some(s.extent),
            Mechanism::GaussMix(_) => None,
        }
    }

    pub fn gauss_mix_spec(&self) -> Option<&GaussMixSpec> {
        match &self.mechanism {
            Mechanism::GaussMix(s) => Some(s),
            Mechanism::ShapeRaster(_) => None,
        }
    }

    /// The structural assignment `f(class, u)`, rounded to the `f32` grid.
    pub fn mechanism(&self, class: usize, u: &TensorGrid) -> Result<TensorGrid> {
        if class >= self.classes() {
            return Err(Error::config(format!("class {class} out of range [0, {})", self.classes())));
        }
        if u.len() != self.noise_dim() {
            return Err(Error::config(format!("noise has {} values, expected {}", u.len(), self.noise_dim())));
        }
        let x = match &self.mechanism {
            Mechanism::GaussMix(s) => s.apply_exact(class, u.values()),
            Mechanism::ShapeRaster(s) => s.apply_exact(class, u.values()),
        };
        Ok(TensorGrid::vector(x)?.round_to_f32())
    }

    /// Inverse-CDF class draw from the cause's own uniform noise.
    pub fn class_from_uniform(&self, u_class: f64) -> usize {
        let mut acc = 0.0;
        for (k, p) in self.prior().iter().enumerate() {
            acc += p;
            if u_class < acc {
                return k;
            }
        }
        self.classes() - 1
    }
}

/// One observation with its class label and recorded exogenous noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: TensorGrid,
    pub y: usize,
    pub u: TensorGrid,
    pub u_class: f64,
}

/// Train/validation/test partitions of one generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: CausalGraph2,
    pub train: Vec<LabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Sizes of the 80/10/10 split of `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let validation = n / 10;
    (train, validation, n - train - validation)
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledSample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &LabeledSample> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    /// Reassemble from samples in generation order.
    pub fn from_samples(graph: CausalGraph2, mut samples: Vec<LabeledSample>) -> Self {
        let (train, validation, _) = split_sizes(samples.len());
        let test = samples.split_off(train + validation);
        let validation_part = samples.split_off(train);
        Self {
            graph,
            train: samples,
            validation: validation_part,
            test,
        }
    }
}

/// Draw one sample from an independent stream keyed by `(seed, index)`.
pub fn draw_sample(graph: &CausalGraph2, seed: u64, index: u64) -> Result<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let u_class: f64 = rng.random();
    let y = graph.class_from_uniform(u_class);
    let u: Vec<f64> = (0..graph.noise_dim())
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32 as f64)
        .collect();
    let u = TensorGrid::vector(u)?;
    let x = graph.mechanism(y, &u)?;
    Ok(LabeledSample { x, y, u, u_class })
}

/// `n` i.i.d. samples split 80/10/10 in generation order.
pub fn generate_dataset(graph: &CausalGraph2, n: usize, seed: u64) -> Result<Dataset> {
    if n < graph.classes() {
        return Err(Error::config(format!("need at least {} samples, got {n}", graph.classes())));
    }
    let samples = (0..n as u64)
        .map(|i| draw_sample(graph, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_samples(graph.clone(), samples))
}

/// Exact counterfactual: the same exogenous noise pushed through the target mechanism.
pub fn ground_truth_counterfactual(graph: &CausalGraph2, sample: &LabeledSample, target: usize) -> Result<TensorGrid> {
    graph.mechanism(target, &sample.u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_graph() -> CausalGraph2 {
        CausalGraph2::gauss_mix(GaussMixSpec {
            prior: vec![0.5, 0.5],
            means: vec![vec![-2.0], vec![2.0]],
            factors: vec![vec![1.0], vec![1.0]],
        })
        .unwrap()
    }

    #[test]
    fn class_frequencies_within_binomial_bound() {
        let g = CausalGraph2::gauss_mix(GaussMixSpec::symmetric(2, 2, 4.0, 1.0).unwrap()).unwrap();
        let ds = generate_dataset(&g, 1000, 17).unwrap();
        let ones = ds.all().filter(|s| s.y == 1).count() as f64;
        let bound = 4.0 * (1000.0f64 * 0.25).sqrt();
        assert!((ones - 500.0).abs() <= bound, "{ones}");
    }

    #[test]
    fn gauss_mix_samples_satisfy_mechanism() {
        let g = CausalGraph2::gauss_mix(GaussMixSpec::symmetric(3, 3, 5.0, 0.7).unwrap()).unwrap();
        let spec = g.gauss_mix_spec().unwrap().clone();
        for s in generate_dataset(&g, 200, 5).unwrap().all() {
            let exact = spec.apply_exact(s.y, s.u.values());
            for (a, b) in s.x.values().iter().zip(&exact) {
                assert_eq!(*a, *b as f32 as f64);
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
            assert_eq!(ground_truth_counterfactual(&g, s, s.y).unwrap(), s.x);
        }
    }

    #[test]
    fn raster_samples_match_templates() {
        let g = CausalGraph2::shape_raster(RasterSpec::new(16).unwrap()).unwrap();
        let Mechanism::ShapeRaster(spec) = &g.mechanism else { unreachable!() };
        let ds = generate_dataset(&g, 60, 2).unwrap();
        for s in ds.all() {
            assert_eq!(s.x.len(), 256);
            assert!(s.x.values().iter().all(|v| (0.0..=1.0).contains(v)));
            let tmpl = spec.template(s.y, &spec.style(s.u.values()));
            for ((x, t), z) in s.x.values().iter().zip(&tmpl).zip(&s.u.values()[RASTER_STYLE_DIMS..]) {
                let expected = (t + spec.pixel_noise * z).clamp(0.0, 1.0);
                assert!((x - expected).abs() < 1e-6);
            }
        }
        let counts: Vec<usize> = (0..3).map(|k| ds.all().filter(|s| s.y == k).count()).collect();
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn same_seed_same_dataset() {
        let g = CausalGraph2::shape_raster(RasterSpec::new(16).unwrap()).unwrap();
        assert_eq!(generate_dataset(&g, 30, 9).unwrap(), generate_dataset(&g, 30, 9).unwrap());
        assert_ne!(generate_dataset(&g, 30, 9).unwrap(), generate_dataset(&g, 30, 10).unwrap());
    }

    #[test]
    fn split_is_80_10_10() {
        let g = line_graph();
        let ds = generate_dataset(&g, 1000, 1).unwrap();
        assert_eq!((ds.train.len(), ds.validation.len(), ds.test.len()), (800, 100, 100));
        assert_eq!(split_sizes(7), (5, 0, 2));
        assert!(generate_dataset(&g, 1, 1).is_err());
    }

    #[test]
    fn counterfactual_examples() {
        let g = line_graph();
        let sample = LabeledSample {
            x: TensorGrid::vector(vec![-1.3]).unwrap(),
            y: 0,
            u: TensorGrid::vector(vec![0.7]).unwrap(),
            u_class: 0.2,
        };
        let cf = ground_truth_counterfactual(&g, &sample, 1).unwrap();
        assert!((cf.values()[0] - 2.7).abs() < 1e-6);

        let zero = LabeledSample { u: TensorGrid::zeros(&[1]), ..sample.clone() };
        assert_eq!(ground_truth_counterfactual(&g, &zero, 1).unwrap().values(), &[2.0]);

        assert!(matches!(ground_truth_counterfactual(&g, &sample, 2), Err(Error::Config(_))));
    }

    #[test]
    fn counterfactual_round_trip() {
        let g = CausalGraph2::gauss_mix(GaussMixSpec::symmetric(2, 3, 4.0, 0.8).unwrap()).unwrap();
        for s in generate_dataset(&g, 50, 3).unwrap().all() {
            for target in 0..3 {
                let cf = LabeledSample {
                    x: ground_truth_counterfactual(&g, s, target).unwrap(),
                    y: target,
                    ..s.clone()
                };
                assert_eq!(ground_truth_counterfactual(&g, &cf, s.y).unwrap(), s.x);
            }
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = GaussMixSpec::symmetric(2, 2, 4.0, 1.0).unwrap();
        s.factors[0][1] = 0.5;
        assert!(s.validate().is_err());
        let mut s = GaussMixSpec::symmetric(2, 2, 4.0, 1.0).unwrap();
        s.prior = vec![0.7, 0.7];
        assert!(s.validate().is_err());
        assert!(GaussMixSpec::symmetric(17, 2, 4.0, 1.0).is_err());
        assert!(CausalGraph2::gauss_mix(GaussMixSpec::symmetric(2, 1, 4.0, 1.0).unwrap()).is_err());
    }
}
