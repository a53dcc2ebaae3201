//! Counterfactual evaluation: KL divergence between VAE latents, divergence sets,
//! the counterfactual latent divergence (CLD) and the autoencoder metrics IM1/IM2.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{stack_tensors, AutoencoderBank, VaeHandle};
use crate::sampler::CounterfactualRecord;
use crate::scm::LabeledSample;
use crate::tensor::TensorGrid;

/// Regulariser in the IM1/IM2 denominators.
pub const DEFAULT_EPS_REG: f64 = 1e-8;

/// Diagonal Gaussian `N(mu, diag(sigma^2))` produced by a VAE encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::config(format!("mu has {} entries, sigma {}", mu.len(), sigma.len())));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::numeric("latent mean is not finite"));
        }
        if sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::numeric("latent scale must be positive and finite"));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `KL(a || b)` between diagonal Gaussians.
pub fn kl_diag_gaussian(a: &GaussianLatent, b: &GaussianLatent) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::config(format!("latent dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let kl: f64 = (0..a.dim())
        .map(|i| {
            let (sa, sb) = (a.sigma[i], b.sigma[i]);
            let dm = a.mu[i] - b.mu[i];
            (sb / sa).ln() + (sa * sa + dm * dm) / (2.0 * sb * sb) - 0.5
        })
        .sum();
    // rounding can leave tiny negatives for identical inputs
    Ok(kl.max(0.0))
}

/// Encoded latents and labels of the split that divergence populations are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitLatents {
    pub latents: Vec<GaussianLatent>,
    pub labels: Vec<usize>,
    observations: Vec<Vec<f64>>,
}

impl SplitLatents {
    pub fn encode(vae: &VaeHandle, samples: &[LabeledSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("comparison split is empty"));
        }
        let x = stack_tensors(samples.iter().map(|s| &s.x))?;
        let latents = vae.encode_latents(x.view())?;
        Ok(Self {
            latents,
            labels: samples.iter().map(|s| s.y).collect(),
            observations: samples.iter().map(|s| s.x.values().to_vec()).collect(),
        })
    }

    /// Latents supplied directly; the observations are unknown, so no member is ever
    /// recognised as a factual unless an index is passed explicitly.
    pub fn from_parts(latents: Vec<GaussianLatent>, labels: Vec<usize>) -> Result<Self> {
        if latents.len() != labels.len() || latents.is_empty() {
            return Err(Error::config("need one label per latent and at least one latent"));
        }
        Ok(Self {
            latents,
            labels,
            observations: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// Index of the member whose observation equals `x` exactly.
    pub fn position_of(&self, x: &[f64]) -> Option<usize> {
        self.observations.iter().position(|o| o.as_slice() == x)
    }
}

/// Divergence populations for one factual/counterfactual pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSets {
    /// `D(x, x_F)` over factual-class members other than the factual itself.
    pub s_f: Vec<f64>,
    /// `D(x, x_F)` over target-class members.
    pub s_cf: Vec<f64>,
    /// `D(x_CF, x_F)`.
    pub div: f64,
}

impl DivergenceSets {
    /// Fraction of `s_cf` at or below `div`.
    pub fn p_scf_le(&self) -> Result<f64> {
        fraction(&self.s_cf, |d| d <= self.div, "counterfactual-class")
    }

    /// Fraction of `s_f` at or above `div`.
    pub fn p_sf_ge(&self) -> Result<f64> {
        fraction(&self.s_f, |d| d >= self.div, "factual-class")
    }
}

fn fraction(set: &[f64], pred: impl Fn(f64) -> bool, what: &str) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::config(format!("{what} divergence set is empty")));
    }
    Ok(set.iter().filter(|&&d| pred(d)).count() as f64 / set.len() as f64)
}

/// Build `S_F`, `S_CF` and `div`. `exclude` names the split member that is the factual.
pub fn build_divergence_sets(
    split: &SplitLatents,
    factual: &GaussianLatent,
    factual_class: usize,
    exclude: Option<usize>,
    counterfactual: &GaussianLatent,
    target: usize,
) -> Result<DivergenceSets> {
    let div = kl_diag_gaussian(counterfactual, factual)?;
    let (mut s_f, mut s_cf) = (Vec::new(), Vec::new());
    for (i, (z, &y)) in split.latents.iter().zip(&split.labels).enumerate() {
        if y == factual_class && Some(i) != exclude {
            s_f.push(kl_diag_gaussian(z, factual)?);
        }
        if y == target {
            s_cf.push(kl_diag_gaussian(z, factual)?);
        }
    }
    if s_f.is_empty() {
        return Err(Error::config(format!("split has no other members of factual class {factual_class}")));
    }
    if s_cf.is_empty() {
        return Err(Error::config(format!("split has no members of target class {target}")));
    }
    Ok(DivergenceSets { s_f, s_cf, div })
}

/// `ln(e^p1 + e^p2)`.
pub fn cld_from_probabilities(p_scf_le: f64, p_sf_ge: f64) -> f64 {
    let m = p_scf_le.max(p_sf_ge);
    m + ((p_scf_le - m).exp() + (p_sf_ge - m).exp()).ln()
}

pub fn cld(sets: &DivergenceSets) -> Result<f64> {
    Ok(cld_from_probabilities(sets.p_scf_le()?, sets.p_sf_ge()?))
}

/// Which class-specific autoencoder IM2 compares against the global one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Im2Variant {
    /// The autoencoder of the counterfactual target class.
    #[default]
    Target,
    /// The autoencoder of the factual class.
    Factual,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn reconstruct(bank: &AutoencoderBank, class: Option<usize>, x: &TensorGrid) -> Result<Vec<f64>> {
    let ae = match class {
        Some(k) => bank.class(k)?,
        None => &bank.global,
    };
    Ok(ae.reconstruct(x)?.into_values())
}

/// `||x_CF - AE_target(x_CF)||^2 / (||x_CF - AE_yF(x_CF)||^2 + eps_reg)`.
pub fn im1(bank: &AutoencoderBank, x_cf: &TensorGrid, y_f: usize, target: usize, eps_reg: f64) -> Result<f64> {
    let x = x_cf.values();
    let num = sq_dist(x, &reconstruct(bank, Some(target), x_cf)?);
    let den = sq_dist(x, &reconstruct(bank, Some(y_f), x_cf)?);
    Ok(num / (den + eps_reg))
}

/// `||AE_class(x_CF) - AE(x_CF)||^2 / (||x_CF||_1 + eps_reg)`; `class` is normally the target.
pub fn im2(bank: &AutoencoderBank, x_cf: &TensorGrid, class: usize, eps_reg: f64) -> Result<f64> {
    let num = sq_dist(&reconstruct(bank, Some(class), x_cf)?, &reconstruct(bank, None, x_cf)?);
    let l1: f64 = x_cf.values().iter().map(|v| v.abs()).sum();
    Ok(num / (l1 + eps_reg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub eps_reg: f64,
    pub im2_variant: Im2Variant,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            eps_reg: DEFAULT_EPS_REG,
            im2_variant: Im2Variant::Target,
        }
    }
}

/// CLD ingredients for one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CldRow {
    pub div: f64,
    pub p_scf_le: f64,
    pub p_sf_ge: f64,
    pub cld: f64,
}

/// CLD for each record against a pre-encoded comparison split.
pub fn cld_rows(vae: &VaeHandle, split: &SplitLatents, records: &[CounterfactualRecord]) -> Result<Vec<CldRow>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let xf = stack_tensors(records.iter().map(|r| &r.factual))?;
    let xcf = stack_tensors(records.iter().map(|r| &r.counterfactual))?;
    let zf = vae.encode_latents(xf.view())?;
    let zcf = vae.encode_latents(xcf.view())?;
    records
        .iter()
        .zip(zf.iter().zip(&zcf))
        .map(|(r, (zf, zcf))| {
            let y_f = r
                .factual_class
                .ok_or_else(|| Error::config("record lacks a factual class"))?;
            let exclude = split.position_of(r.factual.values());
            let sets = build_divergence_sets(split, zf, y_f, exclude, zcf, r.target)?;
            let (p_scf_le, p_sf_ge) = (sets.p_scf_le()?, sets.p_sf_ge()?);
            Ok(CldRow {
                div: sets.div,
                p_scf_le,
                p_sf_ge,
                cld: cld_from_probabilities(p_scf_le, p_sf_ge),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub record_id: usize,
    pub factual_class: usize,
    pub target_class: usize,
    pub s: f64,
    pub div: f64,
    pub p_scf_le: f64,
    pub p_sf_ge: f64,
    pub cld: f64,
    pub im1: f64,
    pub im2: f64,
}

/// Mean and sample standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }

    /// Half-width of the normal-approximation 95% interval of the mean.
    pub fn ci_half_width(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        1.96 * self.std / (self.n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const METRIC_NAMES: [&str; 5] = ["cld", "im1", "im2", "p_scf_le", "p_sf_ge"];

impl EvalReport {
    pub fn column(&self, metric: &str) -> Result<Vec<f64>> {
        let f: fn(&EvalRow) -> f64 = match metric {
            "cld" => |r| r.cld,
            "im1" => |r| r.im1,
            "im2" => |r| r.im2,
            "p_scf_le" => |r| r.p_scf_le,
            "p_sf_ge" => |r| r.p_sf_ge,
            "div" => |r| r.div,
            other => return Err(Error::config(format!("unknown metric {other}"))),
        };
        Ok(self.rows.iter().map(f).collect())
    }

    pub fn aggregate(&self, metric: &str) -> Result<Aggregate> {
        Ok(Aggregate::of(&self.column(metric)?))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("record_id,factual_class,target_class,s,div,p_scf_le,p_sf_ge,cld,im1,im2\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.record_id, r.factual_class, r.target_class, r.s, r.div, r.p_scf_le, r.p_sf_ge, r.cld, r.im1, r.im2
            );
        }
        out
    }

    pub fn aggregates_csv(&self) -> String {
        let mut out = String::from("metric,mean,std,n\n");
        for m in METRIC_NAMES {
            let a = self.aggregate(m).expect("known metric");
            let _ = writeln!(out, "{m},{},{},{}", a.mean, a.std, a.n);
        }
        out
    }
}

/// Per-record CLD, IM1 and IM2 for a corpus of counterfactuals.
pub fn evaluate_corpus(
    vae: &VaeHandle,
    bank: &AutoencoderBank,
    records: &[CounterfactualRecord],
    split: &SplitLatents,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::config("no counterfactual records to evaluate"));
    }
    let clds = cld_rows(vae, split, records)?;
    let xcf = stack_tensors(records.iter().map(|r| &r.counterfactual))?;
    let mut recon: Vec<Array2<f64>> = Vec::with_capacity(bank.classes());
    for ae in &bank.per_class {
        recon.push(ae.reconstruct_batch(xcf.view())?);
    }
    let global = bank.global.reconstruct_batch(xcf.view())?;
    let class_recon = |k: usize| -> Result<&Array2<f64>> {
        recon
            .get(k)
            .ok_or_else(|| Error::config(format!("no autoencoder for class {k}")))
    };
    let eps = options.eps_reg;
    let rows = records
        .iter()
        .zip(clds)
        .enumerate()
        .map(|(i, (r, c))| {
            let y_f = r.factual_class.expect("checked by cld_rows");
            let x = xcf.row(i);
            let x = x.as_slice().expect("standard layout");
            let target_rec = class_recon(r.target)?.row(i);
            let factual_rec = class_recon(y_f)?.row(i);
            let num = sq_dist(x, target_rec.as_slice().expect("standard layout"));
            let den = sq_dist(x, factual_rec.as_slice().expect("standard layout"));
            let im2_class = match options.im2_variant {
                Im2Variant::Target => target_rec,
                Im2Variant::Factual => factual_rec,
            };
            let num2 = sq_dist(im2_class.as_slice().expect("standard layout"), global.row(i).as_slice().expect("standard layout"));
            let l1: f64 = x.iter().map(|v| v.abs()).sum();
            Ok(EvalRow {
                record_id: i,
                factual_class: y_f,
                target_class: r.target,
                s: r.scale,
                div: c.div,
                p_scf_le: c.p_scf_le,
                p_sf_ge: c.p_sf_ge,
                cld: c.cld,
                im1: num / (den + eps),
                im2: num2 / (l1 + eps),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Autoencoder;
    use crate::nn::MlpSpec;
    use crate::tensor::ParamSet;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lat(mu: &[f64], sigma: &[f64]) -> GaussianLatent {
        GaussianLatent::new(mu.to_vec(), sigma.to_vec()).unwrap()
    }

    #[test]
    fn kl_examples() {
        let a = lat(&[0.3, -1.0], &[0.5, 2.0]);
        assert_eq!(kl_diag_gaussian(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_diag_gaussian(&lat(&[0.0], &[1.0]), &lat(&[1.0], &[1.0])).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(kl_diag_gaussian(&lat(&[0.0], &[2.0]), &lat(&[0.0], &[1.0])).unwrap(), 0.80685, epsilon = 1e-5);
        assert!(matches!(kl_diag_gaussian(&a, &lat(&[0.0], &[1.0])), Err(Error::Config(_))));
    }

    #[test]
    fn latent_rejects_bad_sigma() {
        assert!(GaussianLatent::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianLatent::new(vec![0.0], vec![f64::INFINITY]).is_err());
        assert!(GaussianLatent::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn cld_worked_values() {
        assert_abs_diff_eq!(cld_from_probabilities(0.0, 0.0), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(cld_from_probabilities(1.0, 1.0), 1.0 + 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(cld_from_probabilities(0.3, 0.6), 1.1543552, epsilon = 1e-7);
    }

    fn six_points() -> SplitLatents {
        let latents = vec![
            lat(&[0.0], &[1.0]),
            lat(&[0.2], &[1.1]),
            lat(&[-0.4], &[0.9]),
            lat(&[3.0], &[1.0]),
            lat(&[2.5], &[0.7]),
            lat(&[3.6], &[1.3]),
        ];
        SplitLatents::from_parts(latents, vec![0, 0, 0, 1, 1, 1]).unwrap()
    }

    #[test]
    fn divergence_sets_match_enumeration() {
        let split = six_points();
        let xf = split.latents[1].clone();
        let xcf = lat(&[1.5], &[1.0]);
        let sets = build_divergence_sets(&split, &xf, 0, Some(1), &xcf, 1).unwrap();
        let kl = |a: &GaussianLatent| kl_diag_gaussian(a, &xf).unwrap();
        assert_eq!(sets.s_f, vec![kl(&split.latents[0]), kl(&split.latents[2])]);
        assert_eq!(sets.s_cf, split.latents[3..].iter().map(kl).collect::<Vec<_>>());
        assert_eq!(sets.div, kl_diag_gaussian(&xcf, &xf).unwrap());
        let p1 = sets.s_cf.iter().filter(|&&d| d <= sets.div).count() as f64 / 3.0;
        let p2 = sets.s_f.iter().filter(|&&d| d >= sets.div).count() as f64 / 2.0;
        assert_eq!(cld(&sets).unwrap(), cld_from_probabilities(p1, p2));
    }

    #[test]
    fn identical_counterfactual_is_extreme() {
        let split = six_points();
        let xf = split.latents[0].clone();
        let sets = build_divergence_sets(&split, &xf, 0, Some(0), &xf, 1).unwrap();
        assert_eq!(sets.div, 0.0);
        assert_eq!(sets.s_f.len(), 2);
        assert_eq!(sets.p_scf_le().unwrap(), 0.0);
        assert_eq!(sets.p_sf_ge().unwrap(), 1.0);
    }

    #[test]
    fn empty_class_is_config_error() {
        let split = six_points();
        let xf = split.latents[0].clone();
        assert!(matches!(build_divergence_sets(&split, &xf, 0, Some(0), &xf, 2), Err(Error::Config(_))));
        let lonely = SplitLatents::from_parts(vec![xf.clone(), xf.clone()], vec![0, 1]).unwrap();
        assert!(matches!(build_divergence_sets(&lonely, &xf, 0, Some(0), &xf, 1), Err(Error::Config(_))));
    }

    /// 1-D autoencoder computing `x -> a * x` exactly.
    fn scaling_ae(a: f64) -> Autoencoder {
        let spec = MlpSpec::new(1, vec![], 1);
        let params = ParamSet::new(vec![
            ("out.weight".into(), TensorGrid::new(vec![1, 1], vec![a]).unwrap()),
            ("out.bias".into(), TensorGrid::vector(vec![0.0]).unwrap()),
        ])
        .unwrap();
        Autoencoder::new(spec, params).unwrap()
    }

    fn bank(a0: f64, a1: f64, g: f64) -> AutoencoderBank {
        AutoencoderBank {
            per_class: vec![scaling_ae(a0), scaling_ae(a1)],
            global: scaling_ae(g),
        }
    }

    #[test]
    fn im1_im2_linear_hand_computation() {
        let b = bank(0.5, 0.9, 0.8);
        let x = TensorGrid::vector(vec![2.0]).unwrap();
        // target 1: (2 - 1.8)^2 = 0.04; factual 0: (2 - 1)^2 = 1
        assert_abs_diff_eq!(im1(&b, &x, 0, 1, 0.0).unwrap(), 0.04, epsilon = 1e-12);
        // (1.8 - 1.6)^2 / 2
        assert_abs_diff_eq!(im2(&b, &x, 1, 0.0).unwrap(), 0.02, epsilon = 1e-12);
    }

    #[test]
    fn im_degenerate_cases() {
        let x = TensorGrid::vector(vec![2.0]).unwrap();
        assert_eq!(im1(&bank(0.5, 1.0, 0.8), &x, 0, 1, DEFAULT_EPS_REG).unwrap(), 0.0);
        assert_abs_diff_eq!(im1(&bank(0.5, 0.5, 0.8), &x, 0, 1, DEFAULT_EPS_REG).unwrap(), 1.0, epsilon = 1e-7);
        assert_eq!(im2(&bank(0.5, 0.8, 0.8), &x, 1, DEFAULT_EPS_REG).unwrap(), 0.0);
        let zero = TensorGrid::vector(vec![0.0]).unwrap();
        assert!(im2(&bank(0.5, 0.9, 0.8), &zero, 1, DEFAULT_EPS_REG).unwrap().is_finite());
    }

    #[test]
    fn aggregates_recompute() {
        let a = Aggregate::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.mean, 2.5);
        assert_abs_diff_eq!(a.std, (5.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_eq!(Aggregate::of(&[0.7; 5]).std, 0.0);
    }

    proptest! {
        #[test]
        fn cld_bounded_and_monotone(p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0, d in 0.0f64..0.5) {
            let c = cld_from_probabilities(p1, p2);
            prop_assert!(c >= 2f64.ln() - 1e-12 && c <= 1.0 + 2f64.ln() + 1e-12);
            prop_assert!(cld_from_probabilities((p1 + d).min(1.0), p2) >= c);
            prop_assert!(cld_from_probabilities(p1, (p2 + d).min(1.0)) >= c);
        }

        #[test]
        fn kl_non_negative(
            ma in prop::collection::vec(-3.0f64..3.0, 3),
            mb in prop::collection::vec(-3.0f64..3.0, 3),
            sa in prop::collection::vec(0.1f64..3.0, 3),
            sb in prop::collection::vec(0.1f64..3.0, 3),
        ) {
            let kl = kl_diag_gaussian(&lat(&ma, &sa), &lat(&mb, &sb)).unwrap();
            prop_assert!(kl >= 0.0);
        }

        #[test]
        fn fractions_invariant_under_duplication(s in prop::collection::vec(0.0f64..2.0, 1..20), div in 0.0f64..2.0) {
            let sets = DivergenceSets { s_f: s.clone(), s_cf: s.clone(), div };
            let doubled: Vec<f64> = s.iter().chain(&s).copied().collect();
            let sets2 = DivergenceSets { s_f: doubled.clone(), s_cf: doubled, div };
            prop_assert_eq!(cld(&sets).unwrap(), cld(&sets2).unwrap());
        }
    }
}
