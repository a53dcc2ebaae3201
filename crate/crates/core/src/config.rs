//! Experiment configuration: a sectioned `key = value` TOML file plus CLI overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::Im2Variant;
use crate::models::{AutoencoderConfig, ClassifierConfig, DenoiserConfig, VaeConfig};
use crate::sampler::DdimCoefficient;
use crate::schedule::DiffusionSchedule;
use crate::scm::{CausalGraph2, GaussMixSpec, RasterSpec, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussMix,
    ShapeRaster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub family: Family,
    pub n: usize,
    pub seed: u64,
    /// Gauss-mix: observation dimension, number of classes, mean spacing and component std.
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub std: f64,
    /// Shape-raster: image side length, pixel noise and mean bar intensity.
    pub extent: usize,
    pub pixel_noise: f64,
    pub intensity: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            family: Family::GaussMix,
            n: 2000,
            seed: 0,
            dim: 2,
            classes: 2,
            separation: 6.0,
            std: 1.0,
            extent: 16,
            pixel_noise: 0.03,
            intensity: 0.8,
        }
    }
}

impl DatasetConfig {
    pub fn graph(&self) -> Result<CausalGraph2> {
        match self.family {
            Family::GaussMix => CausalGraph2::gauss_mix(GaussMixSpec::symmetric(self.dim, self.classes, self.separation, self.std)?),
            Family::ShapeRaster => {
                let mut spec = RasterSpec::new(self.extent)?;
                spec.pixel_noise = self.pixel_noise;
                spec.intensity = self.intensity;
                CausalGraph2::shape_raster(spec)
            }
        }
    }
}

/// `profile = "default" | "short" | "custom"`; custom uses the explicit fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub profile: String,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            profile: "default".into(),
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    /// Parse a `--steps` value: a profile name or a step count with the default beta range
    /// rescaled so the terminal signal level stays comparable.
    pub fn from_flag(flag: &str) -> Result<Self> {
        match flag {
            "default" | "short" => Ok(Self {
                profile: flag.into(),
                ..Self::default()
            }),
            n => {
                let steps: usize = n
                    .parse()
                    .map_err(|_| Error::config(format!("--steps expects default, short or a step count, got {n:?}")))?;
                if steps == 0 {
                    return Err(Error::config("--steps must be positive"));
                }
                Ok(Self {
                    profile: "custom".into(),
                    steps,
                    beta_min: 1e-4,
                    beta_max: (0.02 * 1000.0 / steps as f64).min(0.5),
                })
            }
        }
    }

    pub fn build(&self) -> Result<DiffusionSchedule> {
        match self.profile.as_str() {
            "default" => Ok(DiffusionSchedule::default_profile()),
            "short" => Ok(DiffusionSchedule::short_profile()),
            "custom" => DiffusionSchedule::linear(self.steps, self.beta_min, self.beta_max),
            other => Err(Error::config(format!("unknown schedule profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    /// Scale used by `counterfact` and `intervene`.
    pub scale: f64,
    /// Grid swept by `sweep-scale`.
    pub grid: Vec<f64>,
    pub coefficient: DdimCoefficient,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            scale: 1.0,
            grid: (0..=12).map(|i| i as f64 * 0.25).collect(),
            coefficient: DdimCoefficient::Corrected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactConfig {
    /// Number of factuals drawn from the split (all of it when larger).
    pub count: usize,
    pub split: Split,
    pub seed: u64,
}

impl Default for CounterfactConfig {
    fn default() -> Self {
        Self {
            count: 200,
            split: Split::Test,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterveneConfig {
    pub count: usize,
    pub target: usize,
    /// All samples start from one recorded latent.
    pub shared_latent: bool,
    pub seed: u64,
}

impl Default for InterveneConfig {
    fn default() -> Self {
        Self {
            count: 16,
            target: 0,
            shared_latent: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Split whose members populate the divergence sets.
    pub split: Split,
    pub eps_reg: f64,
    pub im2_variant: Im2Variant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            eps_reg: crate::metrics::DEFAULT_EPS_REG,
            im2_variant: Im2Variant::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    /// Replace learned noise and guidance with closed-form oracles where available.
    pub use_oracle: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            use_oracle: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub classifier: ClassifierConfig,
    pub vae: VaeConfig,
    pub autoencoder: AutoencoderConfig,
    pub guidance: GuidanceSection,
    pub counterfact: CounterfactConfig,
    pub intervene: InterveneConfig,
    pub eval: EvalConfig,
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub steps: Option<String>,
    pub use_oracle: bool,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Set every seed from one master value: the dataset gets `seed`, each later stage
    /// `seed + k` in pipeline order.
    pub fn reseed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.denoiser.train.seed = seed.wrapping_add(1);
        self.classifier.train.seed = seed.wrapping_add(2);
        self.vae.train.seed = seed.wrapping_add(3);
        self.autoencoder.train.seed = seed.wrapping_add(4);
        self.counterfact.seed = seed.wrapping_add(5);
        self.intervene.seed = seed.wrapping_add(6);
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.reseed(seed);
        }
        if let Some(out) = &o.out {
            self.run.out = out.clone();
        }
        if let Some(steps) = &o.steps {
            self.schedule = ScheduleConfig::from_flag(steps)?;
        }
        if o.use_oracle {
            self.run.use_oracle = true;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.graph()?;
        self.schedule.build()?;
        for t in [&self.denoiser.train, &self.classifier.train, &self.vae.train, &self.autoencoder.train] {
            t.validate()?;
        }
        if let Some(s) = std::iter::once(&self.guidance.scale)
            .chain(&self.guidance.grid)
            .find(|s| !(**s >= 0.0 && s.is_finite()))
        {
            return Err(Error::config(format!("guidance scales must be finite and >= 0, got {s}")));
        }
        if self.guidance.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("guidance grid must be strictly ascending"));
        }
        if self.counterfact.count == 0 || self.intervene.count == 0 {
            return Err(Error::config("record counts must be positive"));
        }
        if self.intervene.target >= self.dataset.graph()?.classes() {
            return Err(Error::config(format!("intervention target {} out of range", self.intervene.target)));
        }
        if !(self.eval.eps_reg >= 0.0) {
            return Err(Error::config("eps_reg must be non-negative"));
        }
        Ok(())
    }

    /// Hash of everything that influences numeric outputs; the output directory is excluded.
    pub fn hash(&self) -> u64 {
        let mut c = self.clone();
        c.run.out = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serialises");
        let d = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn sections_parse() {
        let c = ExperimentConfig::parse(
            r#"
[dataset]
family = "shape-raster"
extent = 6
n = 300

[schedule]
profile = "short"

[denoiser]
hidden = [32, 32]

[denoiser.train]
iterations = 10

[guidance]
grid = [0.0, 1.0, 2.0]
"#,
        )
        .unwrap();
        assert_eq!(c.dataset.family, Family::ShapeRaster);
        assert_eq!(c.schedule.build().unwrap().steps(), 200);
        assert_eq!(c.denoiser.train.iterations, 10);
        assert_eq!(c.guidance.grid.len(), 3);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "[guidance]\nscale = -1.0",
            "[guidance]\ngrid = [1.0, 0.5]",
            "[dataset]\nfamily = \"nope\"",
            "[dataset]\nbogus = 1",
            "[schedule]\nprofile = \"weird\"",
            "[intervene]\ntarget = 5",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn overrides_and_hash() {
        let mut c = ExperimentConfig::default();
        let h0 = c.hash();
        c.apply(&Overrides {
            out: Some("elsewhere".into()),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(c.hash(), h0);
        c.apply(&Overrides {
            seed: Some(3),
            steps: Some("100".into()),
            ..Overrides::default()
        })
        .unwrap();
        assert_ne!(c.hash(), h0);
        assert_eq!(c.dataset.seed, 3);
        assert_eq!(c.schedule.build().unwrap().steps(), 100);
        assert!(ScheduleConfig::from_flag("abc").is_err());
    }

    #[test]
    fn default_grid_has_thirteen_points() {
        let g = GuidanceSection::default().grid;
        assert_eq!(g.len(), 13);
        assert_eq!(g[12], 3.0);
    }
}
