//! Experiment commands over an output directory:
//!
//! ```text
//! out/
//!   data/dataset.dscm
//!   models/{denoiser,classifier,vae,ae_class<k>,ae_global}.dsck + *_loss.csv
//!   records/{counterfactuals,interventions}.dscf
//!   images/*.pgm                    (shape-raster only)
//!   reports/{eval,eval_aggregates,sweep}.csv
//!   manifests/<command>.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{self, Checkpoint, DatasetFile, InterventionRecord, OutputLock};
use crate::metrics::{cld_rows, evaluate_corpus, Aggregate, EvalOptions, EvalReport, SplitLatents};
use crate::models::{
    stack_observations, train_autoencoder_bank, train_classifier, train_denoiser, train_vae, AutoencoderBank,
    ClassifierHandle, DenoiserHandle, LossCurve, VaeHandle,
};
use crate::sampler::{
    abduct_batch, counterfactual_batch, generate_batch, BatchGuidance, CounterfactualRecord, EpsilonSource,
    GuidanceSource, TrajectoryMeta,
};
use crate::schedule::DiffusionSchedule;
use crate::scm::{ground_truth_counterfactual, generate_dataset, CausalGraph2, Dataset, LabeledSample};
use crate::tensor::TensorGrid;

/// Which model(s) `train` fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainRole {
    Denoiser,
    Classifier,
    Vae,
    AeBank,
    All,
}

impl TrainRole {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "denoiser" => Ok(Self::Denoiser),
            "classifier" => Ok(Self::Classifier),
            "vae" => Ok(Self::Vae),
            "ae-bank" => Ok(Self::AeBank),
            "all" => Ok(Self::All),
            other => Err(Error::config(format!("unknown role {other:?}"))),
        }
    }
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub family: String,
    pub n: usize,
    pub classes: usize,
    pub version: String,
    pub artifacts: Vec<String>,
    pub timings_ms: BTreeMap<String, u128>,
}

/// Paths inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("data/dataset.dscm")
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.models().join(format!("{name}.dsck"))
    }
    pub fn loss_curve(&self, name: &str) -> PathBuf {
        self.models().join(format!("{name}_loss.csv"))
    }
    pub fn counterfactuals(&self) -> PathBuf {
        self.root.join("records/counterfactuals.dscf")
    }
    pub fn interventions(&self) -> PathBuf {
        self.root.join("records/interventions.dscf")
    }
    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join(format!("reports/{name}.csv"))
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join(format!("manifests/{command}.json"))
    }
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    layout: Layout,
    artifacts: Vec<PathBuf>,
    timings: BTreeMap<String, u128>,
    _lock: OutputLock,
}

impl<'a> Run<'a> {
    fn start(cfg: &'a ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg.run.out);
        let lock = OutputLock::acquire(&layout.root)?;
        Ok(Self {
            cfg,
            layout,
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            _lock: lock,
        })
    }

    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        io::write_bytes(&path, bytes)?;
        self.artifacts.push(path);
        Ok(())
    }

    fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.timings.insert(phase.to_string(), start.elapsed().as_millis());
        Ok(out)
    }

    fn finish(self, command: &str, graph: &CausalGraph2, n: usize) -> Result<RunManifest> {
        let rel = |p: &PathBuf| p.strip_prefix(&self.layout.root).unwrap_or(p).display().to_string();
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash: format!("{:016x}", self.cfg.hash()),
            family: graph.mechanism.name().to_string(),
            n,
            classes: graph.classes(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: self.artifacts.iter().map(rel).collect(),
            timings_ms: self.timings.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        io::write_bytes(&self.layout.manifest(command), json.as_bytes())?;
        Ok(manifest)
    }

    fn dataset(&self) -> Result<Dataset> {
        let path = self.layout.dataset();
        if !path.exists() {
            return Err(Error::config(format!("{} not found; run generate-data first", path.display())));
        }
        Ok(io::load_dataset(&path)?.dataset)
    }

    fn schedule(&self) -> Result<DiffusionSchedule> {
        self.cfg.schedule.build()
    }

    fn checkpoint(&self, name: &str) -> Result<Checkpoint> {
        let path = self.layout.checkpoint(name);
        if !path.exists() {
            return Err(Error::config(format!("{} not found; train it first", path.display())));
        }
        io::load_checkpoint(&path)
    }
}

/// Trained models needed for inference, or oracles standing in for them.
pub struct Models {
    pub denoiser: Option<DenoiserHandle>,
    pub classifier: Option<ClassifierHandle>,
}

impl Models {
    fn load(run: &Run<'_>, graph: &CausalGraph2) -> Result<Self> {
        let oracle = run.cfg.run.use_oracle && graph.gauss_mix_spec().is_some();
        if oracle {
            return Ok(Self {
                denoiser: None,
                classifier: None,
            });
        }
        Ok(Self {
            denoiser: Some(run.checkpoint("denoiser")?.into_denoiser()?),
            classifier: Some(run.checkpoint("classifier")?.into_classifier()?),
        })
    }

    pub fn sources<'a>(&'a self, graph: &'a CausalGraph2) -> Result<(EpsilonSource<'a>, GuidanceSource<'a>)> {
        match (&self.denoiser, &self.classifier, graph.gauss_mix_spec()) {
            (Some(d), Some(c), _) => Ok((EpsilonSource::learned(d), GuidanceSource::Classifier(c))),
            (None, None, Some(spec)) => Ok((EpsilonSource::Mixture(spec), GuidanceSource::Mixture(spec))),
            _ => Err(Error::config("no noise model or guidance source available")),
        }
    }
}

pub fn cmd_generate_data(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut run = Run::start(cfg)?;
    let graph = cfg.dataset.graph()?;
    let dataset = run.timed("generate", || generate_dataset(&graph, cfg.dataset.n, cfg.dataset.seed))?;
    let file = DatasetFile {
        dataset,
        config_hash: cfg.hash(),
        seed: cfg.dataset.seed,
    };
    let path = run.layout.dataset();
    run.write(path, &io::encode_dataset(&file)?)?;
    run.finish("generate-data", &graph, cfg.dataset.n)
}

pub fn cmd_train(cfg: &ExperimentConfig, role: TrainRole) -> Result<RunManifest> {
    let mut run = Run::start(cfg)?;
    let dataset = run.dataset()?;
    let graph = dataset.graph.clone();
    let schedule = run.schedule()?;
    let hash = cfg.hash();
    let x = stack_observations(&dataset.train)?;
    let labels: Vec<usize> = dataset.train.iter().map(|s| s.y).collect();
    let all = role == TrainRole::All;

    if all || role == TrainRole::Denoiser {
        let (h, curve) = run.timed("denoiser", || train_denoiser(&x, &schedule, &cfg.denoiser))?;
        save_model(&mut run, "denoiser", &Checkpoint::from_denoiser(&h, hash), &curve)?;
    }
    if all || role == TrainRole::Classifier {
        let (h, curve) = run.timed("classifier", || train_classifier(&x, &labels, graph.classes(), &schedule, &cfg.classifier))?;
        save_model(&mut run, "classifier", &Checkpoint::from_classifier(&h, hash), &curve)?;
    }
    if all || role == TrainRole::Vae {
        let (h, curve) = run.timed("vae", || train_vae(&x, &cfg.vae))?;
        save_model(&mut run, "vae", &Checkpoint::from_vae(&h, hash), &curve)?;
    }
    if all || role == TrainRole::AeBank {
        let (bank, curves) = run.timed("ae-bank", || train_autoencoder_bank(&dataset.train, graph.classes(), &cfg.autoencoder))?;
        let names = (0..graph.classes()).map(|k| format!("ae_class{k}")).chain(["ae_global".to_string()]);
        let aes = bank.per_class.iter().chain(std::iter::once(&bank.global));
        for ((name, ae), curve) in names.zip(aes).zip(&curves) {
            save_model(&mut run, &name, &Checkpoint::from_autoencoder(ae, hash), curve)?;
        }
    }
    let command = format!("train-{}", serde_json::to_value(role).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
    run.finish(&command, &graph, dataset.len())
}

fn save_model(run: &mut Run<'_>, name: &str, ck: &Checkpoint, curve: &LossCurve) -> Result<()> {
    let path = run.layout.checkpoint(name);
    run.write(path, &io::encode_checkpoint(ck)?)?;
    let path = run.layout.loss_curve(name);
    run.write(path, io::loss_curve_csv(curve).as_bytes())
}

/// A class drawn uniformly from every class except `factual`.
pub fn draw_target<R: Rng>(rng: &mut R, factual: usize, classes: usize) -> usize {
    let k = rng.random_range(0..classes - 1);
    if k >= factual {
        k + 1
    } else {
        k
    }
}

/// Factual selection and per-factual target classes for `counterfact`.
pub fn select_factuals(samples: &[LabeledSample], count: usize, classes: usize, seed: u64) -> (Vec<LabeledSample>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<LabeledSample> = samples.iter().take(count).cloned().collect();
    let targets = chosen.iter().map(|s| draw_target(&mut rng, s.y, classes)).collect();
    (chosen, targets)
}

pub fn cmd_counterfact(cfg: &ExperimentConfig) -> Result<(RunManifest, Vec<CounterfactualRecord>)> {
    let mut run = Run::start(cfg)?;
    let dataset = run.dataset()?;
    let graph = dataset.graph.clone();
    let schedule = run.schedule()?;
    let models = Models::load(&run, &graph)?;
    let (eps, guide) = models.sources(&graph)?;
    let (factuals, targets) = select_factuals(dataset.split(cfg.counterfact.split), cfg.counterfact.count, graph.classes(), cfg.counterfact.seed);
    if factuals.is_empty() {
        return Err(Error::config("the selected split is empty"));
    }
    let x = stack_observations(&factuals)?;
    let classes: Vec<Option<usize>> = factuals.iter().map(|s| Some(s.y)).collect();
    let scales = vec![cfg.guidance.scale; factuals.len()];
    let records = run.timed("counterfact", || {
        counterfactual_batch(&eps, guide, &schedule, &x, &classes, &targets, &scales, cfg.guidance.coefficient)
    })?;
    let path = run.layout.counterfactuals();
    run.write(path, &io::encode_counterfactuals(&records, cfg.hash())?)?;
    if let Some(extent) = graph.raster_extent() {
        for (i, (r, s)) in records.iter().zip(&factuals).enumerate() {
            let truth = ground_truth_counterfactual(&graph, s, r.target)?;
            let strip = io::encode_pgm_strip(extent, &[r.factual.values(), r.counterfactual.values(), truth.values()])?;
            let path = run.layout.images().join(format!("cf_{i:04}.pgm"));
            run.write(path, &strip)?;
        }
    }
    let manifest = run.finish("counterfact", &graph, records.len())?;
    Ok((manifest, records))
}

pub fn cmd_intervene(cfg: &ExperimentConfig) -> Result<(RunManifest, Vec<InterventionRecord>)> {
    let mut run = Run::start(cfg)?;
    let dataset = run.dataset()?;
    let graph = dataset.graph.clone();
    let schedule = run.schedule()?;
    let models = Models::load(&run, &graph)?;
    let (eps, guide) = models.sources(&graph)?;
    let ic = &cfg.intervene;
    let d = graph.obs_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(ic.seed);
    let draws = if ic.shared_latent { 1 } else { ic.count };
    let fresh = Array2::from_shape_simple_fn((draws, d), || rng.sample::<f64, _>(StandardNormal) as f32 as f64);
    let latents = if ic.shared_latent {
        Array2::from_shape_fn((ic.count, d), |(_, j)| fresh[[0, j]])
    } else {
        fresh
    };
    let targets = vec![ic.target; ic.count];
    let scales = vec![cfg.guidance.scale; ic.count];
    let guidance = BatchGuidance {
        source: guide,
        scales: &scales,
        targets: &targets,
    };
    let samples = run.timed("intervene", || generate_batch(&eps, Some(guidance), &schedule, &latents, cfg.guidance.coefficient))?;
    let records = (0..ic.count)
        .map(|i| {
            Ok(InterventionRecord {
                latent: TensorGrid::vector(latents.row(i).to_vec())?,
                target: ic.target,
                scale: cfg.guidance.scale,
                sample: TensorGrid::vector(samples.row(i).to_vec())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = TrajectoryMeta {
        steps: schedule.steps(),
        schedule_fingerprint: schedule.fingerprint(),
        epsilon_source: eps.tag(),
        guidance_source: guide.tag().into(),
        coefficient: cfg.guidance.coefficient,
    };
    let path = run.layout.interventions();
    run.write(path, &io::encode_interventions(&records, &meta, cfg.hash())?)?;
    if let Some(extent) = graph.raster_extent() {
        for (i, r) in records.iter().enumerate() {
            let path = run.layout.images().join(format!("do_{i:04}.pgm"));
            run.write(path, &io::encode_pgm(extent, r.sample.values())?)?;
        }
    }
    let manifest = run.finish("intervene", &graph, records.len())?;
    Ok((manifest, records))
}

fn load_evaluators(run: &Run<'_>, classes: usize) -> Result<(VaeHandle, AutoencoderBank)> {
    let vae = run.checkpoint("vae")?.into_vae()?;
    let bank = io::load_bank(&run.layout.models(), classes)
        .map_err(|e| Error::config(format!("autoencoder bank unavailable: {e}")))?;
    Ok((vae, bank))
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<(RunManifest, EvalReport)> {
    let mut run = Run::start(cfg)?;
    let dataset = run.dataset()?;
    let graph = dataset.graph.clone();
    let path = run.layout.counterfactuals();
    if !path.exists() {
        return Err(Error::config(format!("{} not found; run counterfact first", path.display())));
    }
    let (records, _) = io::decode_counterfactuals(&fs::read(&path)?)?;
    let (vae, bank) = load_evaluators(&run, graph.classes())?;
    let options = EvalOptions {
        eps_reg: cfg.eval.eps_reg,
        im2_variant: cfg.eval.im2_variant,
    };
    let report = run.timed("eval", || {
        let split = SplitLatents::encode(&vae, dataset.split(cfg.eval.split))?;
        evaluate_corpus(&vae, &bank, &records, &split, &options)
    })?;
    let path = run.layout.report("eval");
    run.write(path, report.to_csv().as_bytes())?;
    let path = run.layout.report("eval_aggregates");
    run.write(path, report.aggregates_csv().as_bytes())?;
    let manifest = run.finish("eval", &graph, report.rows.len())?;
    Ok((manifest, report))
}

/// One row of the scale sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub s: f64,
    pub mean_cld: f64,
    pub ci_half_width: f64,
    pub n: usize,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("s,mean_cld,ci_half_width,n\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.s, r.mean_cld, r.ci_half_width, r.n));
    }
    out
}

/// Counterfactuals of `factuals` for every scale in `grid`, sharing one abduction.
/// Returns one record list per scale.
#[allow(clippy::too_many_arguments)]
pub fn counterfactuals_over_grid(
    eps: &EpsilonSource<'_>,
    guide: GuidanceSource<'_>,
    schedule: &DiffusionSchedule,
    factuals: &[LabeledSample],
    targets: &[usize],
    grid: &[f64],
    coefficient: crate::sampler::DdimCoefficient,
) -> Result<Vec<Vec<CounterfactualRecord>>> {
    let x = stack_observations(factuals)?;
    let n = x.nrows();
    let latents = abduct_batch(eps, schedule, &x, coefficient)?;
    let rows = n * grid.len();
    let tiled = Array2::from_shape_fn((rows, x.ncols()), |(i, j)| latents[[i % n, j]]);
    let scales: Vec<f64> = (0..rows).map(|i| grid[i / n]).collect();
    let tiled_targets: Vec<usize> = (0..rows).map(|i| targets[i % n]).collect();
    let guidance = BatchGuidance {
        source: guide,
        scales: &scales,
        targets: &tiled_targets,
    };
    let out = generate_batch(eps, Some(guidance), schedule, &tiled, coefficient)?;
    let meta = TrajectoryMeta {
        steps: schedule.steps(),
        schedule_fingerprint: schedule.fingerprint(),
        epsilon_source: eps.tag(),
        guidance_source: guide.tag().into(),
        coefficient,
    };
    grid.iter()
        .enumerate()
        .map(|(g, &s)| {
            (0..n)
                .map(|i| {
                    Ok(CounterfactualRecord {
                        factual: factuals[i].x.clone(),
                        factual_class: Some(factuals[i].y),
                        latent: TensorGrid::vector(latents.row(i).to_vec())?,
                        target: targets[i],
                        scale: s,
                        counterfactual: TensorGrid::vector(out.row(g * n + i).to_vec())?,
                        meta: meta.clone(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Mean CLD and its CI half-width for each grid value.
pub fn sweep_rows(vae: &VaeHandle, split: &SplitLatents, per_scale: &[Vec<CounterfactualRecord>], grid: &[f64]) -> Result<Vec<SweepRow>> {
    per_scale
        .iter()
        .zip(grid)
        .map(|(recs, &s)| {
            let clds: Vec<f64> = cld_rows(vae, split, recs)?.iter().map(|r| r.cld).collect();
            let a = Aggregate::of(&clds);
            Ok(SweepRow {
                s,
                mean_cld: a.mean,
                ci_half_width: a.ci_half_width(),
                n: a.n,
            })
        })
        .collect()
}

pub fn cmd_sweep_scale(cfg: &ExperimentConfig, grid: Option<&[f64]>) -> Result<(RunManifest, Vec<SweepRow>)> {
    let mut run = Run::start(cfg)?;
    let grid: Vec<f64> = grid.map(<[f64]>::to_vec).unwrap_or_else(|| cfg.guidance.grid.clone());
    if grid.is_empty() || grid.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::config("sweep grid must be non-empty with finite non-negative scales"));
    }
    let mut grid = grid;
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let dataset = run.dataset()?;
    let graph = dataset.graph.clone();
    let schedule = run.schedule()?;
    let models = Models::load(&run, &graph)?;
    let (eps, guide) = models.sources(&graph)?;
    let vae = run.checkpoint("vae")?.into_vae()?;
    let (factuals, targets) = select_factuals(dataset.split(cfg.counterfact.split), cfg.counterfact.count, graph.classes(), cfg.counterfact.seed);
    let rows = run.timed("sweep", || {
        let per_scale = counterfactuals_over_grid(&eps, guide, &schedule, &factuals, &targets, &grid, cfg.guidance.coefficient)?;
        let split = SplitLatents::encode(&vae, dataset.split(cfg.eval.split))?;
        sweep_rows(&vae, &split, &per_scale, &grid)
    })?;
    let path = run.layout.report("sweep");
    run.write(path, sweep_csv(&rows).as_bytes())?;
    let manifest = run.finish("sweep-scale", &graph, factuals.len())?;
    Ok((manifest, rows))
}

/// generate-data, train all, counterfact and eval in sequence.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cmd_generate_data(cfg)?;
    cmd_train(cfg, TrainRole::All)?;
    cmd_counterfact(cfg)?;
    Ok(cmd_eval(cfg)?.1)
}

/// Absolute or relative path to the report CSVs of an output directory.
pub fn report_paths(root: &Path) -> Vec<PathBuf> {
    let l = Layout::new(root);
    vec![l.report("eval"), l.report("eval_aggregates")]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_policy_never_returns_factual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..10_000 {
            let f = i % 3;
            let t = draw_target(&mut rng, f, 3);
            assert!(t != f && t < 3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..100).all(|_| draw_target(&mut rng, 0, 2) == 1));
    }

    #[test]
    fn role_names() {
        assert_eq!(TrainRole::parse("ae-bank").unwrap(), TrainRole::AeBank);
        assert!(TrainRole::parse("x").is_err());
    }
}
