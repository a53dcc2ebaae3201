//! Closed-form scores and class posteriors of a diffused Gaussian mixture.
//!
//! At step `t` each component `N(mu_k, S_k)` becomes
//! `N(sqrt(a_t) mu_k, a_t S_k + (1 - a_t) I)`, so the marginal log-density, its
//! gradient and the class posterior are all available exactly.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::schedule::DiffusionSchedule;
use crate::scm::GaussMixSpec;
use crate::tensor::TensorGrid;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
struct Component {
    mean: Vec<f64>,
    chol: Vec<f64>,
    log_norm: f64,
    log_weight: f64,
}

/// A Gaussian mixture after `t` forward diffusion steps.
#[derive(Debug, Clone)]
pub struct DiffusedMixture {
    dim: usize,
    comps: Vec<Component>,
}

fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let v = a[i * d + i] - s;
                if !(v > 0.0) {
                    return Err(Error::numeric("covariance is not positive definite"));
                }
                l[i * d + i] = v.sqrt();
            } else {
                l[i * d + j] = (a[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    Ok(l)
}

impl DiffusedMixture {
    pub fn new(spec: &GaussMixSpec, alpha_cum: f64) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim();
        let sa = alpha_cum.sqrt();
        let comps = (0..spec.classes())
            .map(|k| {
                let mut cov = spec.covariance(k);
                for v in cov.iter_mut() {
                    *v *= alpha_cum;
                }
                for i in 0..d {
                    cov[i * d + i] += 1.0 - alpha_cum;
                }
                let chol = cholesky(&cov, d)?;
                let log_det: f64 = (0..d).map(|i| 2.0 * chol[i * d + i].ln()).sum();
                Ok(Component {
                    mean: spec.means[k].iter().map(|m| sa * m).collect(),
                    chol,
                    log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
                    log_weight: spec.prior[k].ln(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim: d, comps })
    }

    pub fn at_step(spec: &GaussMixSpec, schedule: &DiffusionSchedule, t: usize) -> Result<Self> {
        schedule.check_step(t)?;
        Self::new(spec, schedule.alpha_cum(t))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.comps.len()
    }

    /// `(log N_k(x), grad log N_k(x))` for one component.
    fn component(&self, k: usize, x: &[f64]) -> (f64, Vec<f64>) {
        let c = &self.comps[k];
        let d = self.dim;
        // forward solve L z = x - m
        let mut z = vec![0.0; d];
        for i in 0..d {
            let s: f64 = (0..i).map(|j| c.chol[i * d + j] * z[j]).sum();
            z[i] = (x[i] - c.mean[i] - s) / c.chol[i * d + i];
        }
        let quad: f64 = z.iter().map(|v| v * v).sum();
        // back solve L^T w = z, score = -w
        let mut w = vec![0.0; d];
        for i in (0..d).rev() {
            let s: f64 = (i + 1..d).map(|j| c.chol[j * d + i] * w[j]).sum();
            w[i] = (z[i] - s) / c.chol[i * d + i];
        }
        (c.log_norm - 0.5 * quad, w.into_iter().map(|v| -v).collect())
    }

    fn joint(&self, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        (0..self.comps.len())
            .map(|k| {
                let (lp, g) = self.component(k, x);
                (lp + self.comps[k].log_weight, g)
            })
            .unzip()
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::config(format!("point has {} coordinates, mixture has {}", x.len(), self.dim)));
        }
        Ok(())
    }

    /// Posterior class probabilities.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        let (logs, _) = self.joint(x);
        Ok(softmax(&logs))
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        let (logs, _) = self.joint(x);
        Ok(log_sum_exp(&logs))
    }

    /// `grad log p_t(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        let (logs, grads) = self.joint(x);
        let r = softmax(&logs);
        let mut out = vec![0.0; self.dim];
        for (rk, g) in r.iter().zip(&grads) {
            for (o, gi) in out.iter_mut().zip(g) {
                *o += rk * gi;
            }
        }
        Ok(out)
    }

    /// `grad log p_t(x | y)`: the score of component `y` alone.
    pub fn conditional_score(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_len(x)?;
        self.check_class(y)?;
        Ok(self.component(y, x).1)
    }

    /// `log p_t(y | x)`, accurate when the posterior saturates.
    pub fn class_log_posterior(&self, x: &[f64], y: usize) -> Result<f64> {
        self.check_len(x)?;
        self.check_class(y)?;
        let (logs, _) = self.joint(x);
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if logs[y] == top {
            let rest: f64 = logs
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != y)
                .map(|(_, l)| (l - logs[y]).exp())
                .sum();
            Ok(-rest.ln_1p())
        } else {
            Ok(logs[y] - log_sum_exp(&logs))
        }
    }

    /// `grad log p_t(y | x) = sum_k r_k (grad log N_y - grad log N_k)`.
    pub fn class_grad(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_len(x)?;
        self.check_class(y)?;
        let (logs, grads) = self.joint(x);
        let r = softmax(&logs);
        let mut out = vec![0.0; self.dim];
        for (k, (rk, g)) in r.iter().zip(&grads).enumerate() {
            if k == y {
                continue;
            }
            for ((o, gy), gk) in out.iter_mut().zip(&grads[y]).zip(g) {
                *o += rk * (gy - gk);
            }
        }
        Ok(out)
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.comps.len() {
            return Err(Error::config(format!("class {y} out of range [0, {})", self.comps.len())));
        }
        Ok(())
    }

    /// Row-wise score for a batch.
    pub fn score_rows(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        map_rows(x, |row| self.score(row))
    }

    /// Row-wise class gradient for a batch with per-row targets.
    pub fn class_grad_rows(&self, x: ArrayView2<'_, f64>, targets: &[usize]) -> Result<Array2<f64>> {
        if targets.len() != x.nrows() {
            return Err(Error::config(format!("{} targets for {} rows", targets.len(), x.nrows())));
        }
        let mut out = Array2::zeros(x.dim());
        for (i, (row, &y)) in x.rows().into_iter().zip(targets).enumerate() {
            let g = self.class_grad(&row_vec(row), y)?;
            out.row_mut(i).assign(&ArrayView1::from(&g));
        }
        Ok(out)
    }
}

fn row_vec(row: ArrayView1<'_, f64>) -> Vec<f64> {
    row.iter().copied().collect()
}

fn map_rows(x: ArrayView2<'_, f64>, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let v = f(&row_vec(row))?;
        out.row_mut(i).assign(&ArrayView1::from(&v));
    }
    Ok(out)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `eps = -sqrt(1 - a_t) * grad log p_t(x_t)` for the diffused mixture.
pub fn analytic_epsilon(spec: &GaussMixSpec, schedule: &DiffusionSchedule, x_t: &TensorGrid, t: usize) -> Result<TensorGrid> {
    let mix = DiffusedMixture::at_step(spec, schedule, t)?;
    let k = (1.0 - schedule.alpha_cum(t)).sqrt();
    let score = mix.score(x_t.values())?;
    TensorGrid::new(x_t.shape().to_vec(), score.into_iter().map(|s| -k * s).collect())
}

/// Exact `grad log p_t(target | x_t)`.
pub fn analytic_class_grad(
    spec: &GaussMixSpec,
    schedule: &DiffusionSchedule,
    x_t: &TensorGrid,
    t: usize,
    target: usize,
) -> Result<TensorGrid> {
    let mix = DiffusedMixture::at_step(spec, schedule, t)?;
    TensorGrid::new(x_t.shape().to_vec(), mix.class_grad(x_t.values(), target)?)
}

/// Noise prediction of a point mass at `x_star`: `(x_t - sqrt(a_t) x*) / sqrt(1 - a_t)`,
/// taken as zero at `t = 0`.
pub fn point_mass_epsilon(x_star: &[f64], schedule: &DiffusionSchedule, x_t: &[f64], t: usize) -> Vec<f64> {
    let a = schedule.alpha_cum(t);
    if t == 0 || a >= 1.0 {
        return vec![0.0; x_t.len()];
    }
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    x_t.iter().zip(x_star).map(|(x, s)| (x - sa * s) / sn).collect()
}
