//! On-disk formats: DSCM datasets, DSCK checkpoints, DSCF record files, PGM images,
//! CSV helpers and the output-directory lock.
//!
//! Every binary file opens with a 4-byte magic and a little-endian `u32` version and
//! stores tensors as little-endian `f32`.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Autoencoder, AutoencoderBank, ClassifierHandle, DenoiserHandle, GaussianSkip, VaeHandle};
use crate::nn::MlpSpec;
use crate::sampler::{CounterfactualRecord, TrajectoryMeta};
use crate::scm::{CausalGraph2, Dataset, LabeledSample};
use crate::tensor::{ParamSet, TensorGrid};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_MAGIC: &[u8; 4] = b"DSCM";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSCK";
pub const RECORD_MAGIC: &[u8; 4] = b"DSCF";

const NO_CLASS: u16 = u16::MAX;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(magic: &[u8; 4]) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, values: &[f64]) {
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fn len(&mut self, n: usize) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))?;
        self.u32(n);
        Ok(())
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn json<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let s = serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
        self.str(&s)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        let mut r = Self { buf, pos: 0, what };
        if r.take(4)? != magic {
            return Err(Error::Format(format!("{what}: bad magic")));
        }
        let v = r.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("{what}: unsupported version {v}")));
        }
        Ok(r)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("{}: {e}", self.what)))
    }
    fn json<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T> {
        let s = self.str()?;
        serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", self.what)))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn tensor(shape: Vec<usize>, values: Vec<f64>) -> Result<TensorGrid> {
    TensorGrid::new(shape, values).map_err(|e| Error::Format(e.to_string()))
}

/// Write `bytes` to `path`, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// DSCM

/// Dataset file contents beyond the samples themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub dataset: Dataset,
    pub config_hash: u64,
    pub seed: u64,
}

pub fn encode_dataset(file: &DatasetFile) -> Result<Vec<u8>> {
    let ds = &file.dataset;
    let g = &ds.graph;
    let mut w = Writer::header(DATASET_MAGIC);
    w.u8(g.mechanism.tag());
    w.len(g.classes())?;
    w.len(g.obs_dim())?;
    w.len(g.noise_dim())?;
    w.len(g.raster_extent().unwrap_or(0))?;
    w.u64(ds.len() as u64);
    w.u64(file.config_hash);
    w.u64(file.seed);
    w.json(g)?;
    for s in ds.all() {
        w.f32s(s.x.values());
        w.f32s(s.u.values());
        w.f64(s.u_class);
        w.u16(u16::try_from(s.y).map_err(|_| Error::Format("label exceeds u16".into()))?);
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetFile> {
    let mut r = Reader::open(bytes, DATASET_MAGIC, "dataset")?;
    let tag = r.u8()?;
    let classes = r.len()?;
    let obs_dim = r.len()?;
    let noise_dim = r.len()?;
    let extent = r.len()?;
    let n = r.u64()? as usize;
    let config_hash = r.u64()?;
    let seed = r.u64()?;
    let graph: CausalGraph2 = r.json()?;
    let consistent = graph.mechanism.tag() == tag
        && graph.classes() == classes
        && graph.obs_dim() == obs_dim
        && graph.noise_dim() == noise_dim
        && graph.raster_extent().unwrap_or(0) == extent;
    if !consistent {
        return Err(Error::Format("dataset header disagrees with its parameter block".into()));
    }
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let x = tensor(vec![obs_dim], r.f32s(obs_dim)?)?;
        let u = tensor(vec![noise_dim], r.f32s(noise_dim)?)?;
        let u_class = r.f64()?;
        let y = r.u16()? as usize;
        if y >= classes {
            return Err(Error::Format(format!("label {y} out of range")));
        }
        samples.push(LabeledSample { x, y, u, u_class });
    }
    r.finish()?;
    Ok(DatasetFile {
        dataset: Dataset::from_samples(graph, samples),
        config_hash,
        seed,
    })
}

pub fn save_dataset(path: &Path, file: &DatasetFile) -> Result<()> {
    write_bytes(path, &encode_dataset(file)?)
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    decode_dataset(&read(path)?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// DSCK

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointRole {
    Denoiser,
    Classifier,
    Vae,
    Autoencoder,
}

impl CheckpointRole {
    fn tag(self) -> u8 {
        match self {
            CheckpointRole::Denoiser => 1,
            CheckpointRole::Classifier => 2,
            CheckpointRole::Vae => 3,
            CheckpointRole::Autoencoder => 4,
        }
    }
}

/// Architecture description stored alongside checkpoint tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub nets: Vec<MlpSpec>,
    #[serde(default)]
    pub classes: usize,
    #[serde(default)]
    pub obs_variance: f64,
}

/// Named tensors of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: CheckpointRole,
    pub descriptor: Descriptor,
    pub schedule_fingerprint: u64,
    pub config_hash: u64,
    pub tensors: Vec<(String, TensorGrid)>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer::header(CHECKPOINT_MAGIC);
    w.u8(ck.role.tag());
    w.u64(ck.schedule_fingerprint);
    w.u64(ck.config_hash);
    w.json(&ck.descriptor)?;
    w.len(ck.tensors.len())?;
    for (name, t) in &ck.tensors {
        w.str(name)?;
        w.len(t.shape().len())?;
        for &e in t.shape() {
            w.len(e)?;
        }
        w.f32s(t.values());
    }
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    let tag = r.u8()?;
    let role = [
        CheckpointRole::Denoiser,
        CheckpointRole::Classifier,
        CheckpointRole::Vae,
        CheckpointRole::Autoencoder,
    ]
    .into_iter()
    .find(|r| r.tag() == tag)
    .ok_or_else(|| Error::Format(format!("unknown checkpoint role {tag}")))?;
    let schedule_fingerprint = r.u64()?;
    let config_hash = r.u64()?;
    let descriptor: Descriptor = r.json()?;
    let count = r.len()?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let n = n.ok_or_else(|| Error::Format("tensor shape overflows".into()))?;
        tensors.push((name, tensor(shape, r.f32s(n)?)?));
    }
    r.finish()?;
    Ok(Checkpoint {
        role,
        descriptor,
        schedule_fingerprint,
        config_hash,
        tensors,
    })
}

fn prefixed<'a>(prefix: &str, p: &'a ParamSet) -> impl Iterator<Item = (String, TensorGrid)> + 'a {
    let prefix = prefix.to_string();
    p.iter().map(move |(n, t)| (format!("{prefix}{n}"), t.clone()))
}

fn take_prefixed(tensors: &[(String, TensorGrid)], prefix: &str) -> Result<ParamSet> {
    ParamSet::new(
        tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect(),
    )
}

impl Checkpoint {
    fn expect(&self, role: CheckpointRole, nets: usize) -> Result<()> {
        if self.role != role {
            return Err(Error::Format(format!("expected a {role:?} checkpoint, found {:?}", self.role)));
        }
        if self.descriptor.nets.len() != nets {
            return Err(Error::Format("checkpoint descriptor has the wrong number of networks".into()));
        }
        Ok(())
    }

    pub fn from_denoiser(h: &DenoiserHandle, config_hash: u64) -> Self {
        Self {
            role: CheckpointRole::Denoiser,
            descriptor: Descriptor {
                nets: vec![h.spec.clone()],
                classes: 0,
                obs_variance: 0.0,
            },
            schedule_fingerprint: h.schedule_fingerprint,
            config_hash,
            tensors: prefixed("raw/", &h.params)
                .chain(prefixed("ema/", &h.ema_params))
                .chain(h.skip.iter().flat_map(|sk| {
                    [("alpha_cum", &sk.alpha_cum), ("mean", &sk.mean), ("var", &sk.var)]
                        .map(|(n, v)| (format!("skip/{n}"), TensorGrid::vector(v.clone()).expect("validated skip statistics")))
                }))
                .collect(),
        }
    }

    pub fn into_denoiser(self) -> Result<DenoiserHandle> {
        self.expect(CheckpointRole::Denoiser, 1)?;
        let params = take_prefixed(&self.tensors, "raw/")?;
        let ema = take_prefixed(&self.tensors, "ema/")?;
        let stats = take_prefixed(&self.tensors, "skip/")?;
        let skip = if stats.is_empty() {
            None
        } else {
            let field = |n: &str| -> Result<Vec<f64>> {
                Ok(stats.get(n).ok_or_else(|| Error::Format(format!("denoiser checkpoint lacks skip/{n}")))?.values().to_vec())
            };
            Some(GaussianSkip::new(field("alpha_cum")?, field("mean")?, field("var")?)?)
        };
        DenoiserHandle::new(self.descriptor.nets[0].clone(), params, ema, skip, self.schedule_fingerprint)
    }

    pub fn from_classifier(h: &ClassifierHandle, config_hash: u64) -> Self {
        Self {
            role: CheckpointRole::Classifier,
            descriptor: Descriptor {
                nets: vec![h.spec.clone()],
                classes: h.classes,
                obs_variance: 0.0,
            },
            schedule_fingerprint: h.schedule_fingerprint,
            config_hash,
            tensors: prefixed("", &h.params).collect(),
        }
    }

    pub fn into_classifier(self) -> Result<ClassifierHandle> {
        self.expect(CheckpointRole::Classifier, 1)?;
        let params = ParamSet::new(self.tensors)?;
        ClassifierHandle::new(self.descriptor.nets[0].clone(), params, self.schedule_fingerprint)
    }

    pub fn from_vae(h: &VaeHandle, config_hash: u64) -> Self {
        Self {
            role: CheckpointRole::Vae,
            descriptor: Descriptor {
                nets: vec![h.encoder.clone(), h.decoder.clone()],
                classes: 0,
                obs_variance: h.obs_variance,
            },
            schedule_fingerprint: 0,
            config_hash,
            tensors: prefixed("enc/", &h.encoder_params)
                .chain(prefixed("dec/", &h.decoder_params))
                .collect(),
        }
    }

    pub fn into_vae(self) -> Result<VaeHandle> {
        self.expect(CheckpointRole::Vae, 2)?;
        let enc = take_prefixed(&self.tensors, "enc/")?;
        let dec = take_prefixed(&self.tensors, "dec/")?;
        let mut nets = self.descriptor.nets.into_iter();
        let (e, d) = (nets.next().expect("two nets"), nets.next().expect("two nets"));
        VaeHandle::new(e, d, enc, dec, self.descriptor.obs_variance)
    }

    pub fn from_autoencoder(ae: &Autoencoder, config_hash: u64) -> Self {
        Self {
            role: CheckpointRole::Autoencoder,
            descriptor: Descriptor {
                nets: vec![ae.spec.clone()],
                classes: 0,
                obs_variance: 0.0,
            },
            schedule_fingerprint: 0,
            config_hash,
            tensors: prefixed("", &ae.params).collect(),
        }
    }

    pub fn into_autoencoder(self) -> Result<Autoencoder> {
        self.expect(CheckpointRole::Autoencoder, 1)?;
        Autoencoder::new(self.descriptor.nets[0].clone(), ParamSet::new(self.tensors)?)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_bytes(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read(path)?)
}

/// File names of an autoencoder bank with `classes` class-specific members.
pub fn bank_paths(dir: &Path, classes: usize) -> Vec<PathBuf> {
    (0..classes)
        .map(|k| dir.join(format!("ae_class{k}.dsck")))
        .chain(std::iter::once(dir.join("ae_global.dsck")))
        .collect()
}

pub fn save_bank(dir: &Path, bank: &AutoencoderBank, config_hash: u64) -> Result<Vec<PathBuf>> {
    let paths = bank_paths(dir, bank.classes());
    for (p, ae) in paths.iter().zip(bank.per_class.iter().chain(std::iter::once(&bank.global))) {
        save_checkpoint(p, &Checkpoint::from_autoencoder(ae, config_hash))?;
    }
    Ok(paths)
}

pub fn load_bank(dir: &Path, classes: usize) -> Result<AutoencoderBank> {
    let mut aes = bank_paths(dir, classes)
        .iter()
        .map(|p| load_checkpoint(p)?.into_autoencoder())
        .collect::<Result<Vec<_>>>()?;
    let global = aes.pop().expect("global autoencoder");
    Ok(AutoencoderBank { per_class: aes, global })
}

// ---------------------------------------------------------------------------
// DSCF

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Counterfactual = 0,
    Intervention = 1,
}

/// A sample drawn under `do(y = target)` from a latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub latent: TensorGrid,
    pub target: usize,
    pub scale: f64,
    pub sample: TensorGrid,
}

fn class_u16(k: Option<usize>) -> Result<u16> {
    match k {
        None => Ok(NO_CLASS),
        Some(k) => u16::try_from(k)
            .ok()
            .filter(|&k| k != NO_CLASS)
            .ok_or_else(|| Error::Format(format!("class {k} does not fit the record format"))),
    }
}

fn record_header(kind: RecordKind, config_hash: u64, count: usize, dim: usize, meta: &TrajectoryMeta) -> Result<Writer> {
    let mut w = Writer::header(RECORD_MAGIC);
    w.u8(kind as u8);
    w.u64(config_hash);
    w.len(count)?;
    w.len(dim)?;
    w.json(meta)?;
    Ok(w)
}

fn read_record_header<'a>(bytes: &'a [u8], kind: RecordKind) -> Result<(Reader<'a>, u64, usize, usize, TrajectoryMeta)> {
    let mut r = Reader::open(bytes, RECORD_MAGIC, "record file")?;
    let k = r.u8()?;
    if k != kind as u8 {
        return Err(Error::Format(format!("record file holds kind {k}, expected {}", kind as u8)));
    }
    let hash = r.u64()?;
    let count = r.len()?;
    let dim = r.len()?;
    let meta = r.json()?;
    Ok((r, hash, count, dim, meta))
}

pub fn encode_counterfactuals(records: &[CounterfactualRecord], config_hash: u64) -> Result<Vec<u8>> {
    let first = records.first().ok_or_else(|| Error::config("no records to write"))?;
    let dim = first.factual.len();
    let mut w = record_header(RecordKind::Counterfactual, config_hash, records.len(), dim, &first.meta)?;
    for r in records {
        if r.factual.len() != dim || r.latent.len() != dim || r.counterfactual.len() != dim {
            return Err(Error::config("records of one file must share a dimension"));
        }
        w.u16(class_u16(r.factual_class)?);
        w.u16(class_u16(Some(r.target))?);
        w.f64(r.scale);
        w.f32s(r.factual.values());
        w.f32s(r.latent.values());
        w.f32s(r.counterfactual.values());
    }
    Ok(w.buf)
}

/// Decoded records and the config hash stored in the file.
pub fn decode_counterfactuals(bytes: &[u8]) -> Result<(Vec<CounterfactualRecord>, u64)> {
    let (mut r, hash, count, dim, meta) = read_record_header(bytes, RecordKind::Counterfactual)?;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let fc = r.u16()?;
        let target = r.u16()? as usize;
        let scale = r.f64()?;
        out.push(CounterfactualRecord {
            factual_class: (fc != NO_CLASS).then_some(fc as usize),
            target,
            scale,
            factual: tensor(vec![dim], r.f32s(dim)?)?,
            latent: tensor(vec![dim], r.f32s(dim)?)?,
            counterfactual: tensor(vec![dim], r.f32s(dim)?)?,
            meta: meta.clone(),
        });
    }
    r.finish()?;
    Ok((out, hash))
}

pub fn encode_interventions(records: &[InterventionRecord], meta: &TrajectoryMeta, config_hash: u64) -> Result<Vec<u8>> {
    let dim = records.first().ok_or_else(|| Error::config("no records to write"))?.sample.len();
    let mut w = record_header(RecordKind::Intervention, config_hash, records.len(), dim, meta)?;
    for r in records {
        if r.latent.len() != dim || r.sample.len() != dim {
            return Err(Error::config("records of one file must share a dimension"));
        }
        w.u16(class_u16(Some(r.target))?);
        w.f64(r.scale);
        w.f32s(r.latent.values());
        w.f32s(r.sample.values());
    }
    Ok(w.buf)
}

pub fn decode_interventions(bytes: &[u8]) -> Result<(Vec<InterventionRecord>, TrajectoryMeta, u64)> {
    let (mut r, hash, count, dim, meta) = read_record_header(bytes, RecordKind::Intervention)?;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let target = r.u16()? as usize;
        let scale = r.f64()?;
        out.push(InterventionRecord {
            target,
            scale,
            latent: tensor(vec![dim], r.f32s(dim)?)?,
            sample: tensor(vec![dim], r.f32s(dim)?)?,
        });
    }
    r.finish()?;
    Ok((out, meta, hash))
}

// ---------------------------------------------------------------------------
// Images, CSV, lock

/// Binary PGM (P5) of a square raster with values clamped to `[0, 1]`.
pub fn encode_pgm(extent: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != extent * extent {
        return Err(Error::config(format!("{} values do not form a {extent}x{extent} image", values.len())));
    }
    let mut out = format!("P5\n{extent} {extent}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Several rasters side by side, separated by one black column.
pub fn encode_pgm_strip(extent: usize, images: &[&[f64]]) -> Result<Vec<u8>> {
    let n = images.len();
    if n == 0 || images.iter().any(|im| im.len() != extent * extent) {
        return Err(Error::config("strip needs at least one image of the stated extent"));
    }
    let width = n * extent + n - 1;
    let mut pixels = vec![0.0; width * extent];
    for (i, im) in images.iter().enumerate() {
        for r in 0..extent {
            for c in 0..extent {
                pixels[r * width + i * (extent + 1) + c] = im[r * extent + c];
            }
        }
    }
    let mut out = format!("P5\n{width} {extent}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn loss_curve_csv(curve: &crate::models::LossCurve) -> String {
    let mut out = String::from("iteration,mean_loss\n");
    for row in &curve.rows {
        out.push_str(&format!("{},{}\n", row.iteration, row.mean_loss));
    }
    out
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE_NAME: &'static str = ".lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(Self::FILE_NAME);
        let mut f: File = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::config(format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{generate_dataset, GaussMixSpec, RasterSpec};

    fn gm_file() -> DatasetFile {
        let g = CausalGraph2::gauss_mix(GaussMixSpec::symmetric(2, 2, 4.0, 1.0).unwrap()).unwrap();
        DatasetFile {
            dataset: generate_dataset(&g, 50, 9).unwrap(),
            config_hash: 0xabc,
            seed: 9,
        }
    }

    #[test]
    fn dataset_round_trip_is_lossless() {
        let f = gm_file();
        let bytes = encode_dataset(&f).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), f);
        let g = CausalGraph2::shape_raster(RasterSpec::new(6).unwrap()).unwrap();
        let f = DatasetFile {
            dataset: generate_dataset(&g, 20, 1).unwrap(),
            config_hash: 1,
            seed: 1,
        };
        assert_eq!(decode_dataset(&encode_dataset(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = encode_dataset(&gm_file()).unwrap();
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_dataset(&long), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = MlpSpec::new(3, vec![5], 3).with_time(4, 10);
        let p = spec.init(1).unwrap().round_to_f32();
        let skip = GaussianSkip::new(vec![0.5; 11], vec![0.1, 0.2, 0.3], vec![1.0, 0.5, 0.25]).unwrap();
        let h = DenoiserHandle::new(spec.clone(), p.clone(), p.clone(), Some(skip), 77).unwrap().quantized();
        let ck = Checkpoint::from_denoiser(&h, 5);
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.into_denoiser().unwrap(), h);
        let plain = DenoiserHandle::new(spec, p.clone(), p, None, 77).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&Checkpoint::from_denoiser(&plain, 5)).unwrap()).unwrap();
        assert_eq!(back.into_denoiser().unwrap(), plain);
        let wrong = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert!(wrong.into_classifier().is_err());
    }

    #[test]
    fn pgm_layout() {
        let img = encode_pgm(2, &[0.0, 1.0, 0.5, 2.0]).unwrap();
        assert!(img.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&img[img.len() - 4..], &[0, 255, 128, 255]);
        let strip = encode_pgm_strip(2, &[&[1.0; 4], &[1.0; 4]]).unwrap();
        assert!(strip.starts_with(b"P5\n5 2\n255\n"));
        assert!(encode_pgm(3, &[0.0; 4]).is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(OutputLock::acquire(dir.path()), Err(Error::Config(_))));
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }
}
