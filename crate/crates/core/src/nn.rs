//! Fully connected networks with SiLU activations and additive time conditioning,
//! with hand-written forward and backward passes.
//!
//! A network maps a batch of rows `x` (and optionally a diffusion step per row) to a
//! batch of outputs:
//!
//! ```text
//! h_0 = x
//! h_i = silu(W_i h_{i-1} + b_i + V_i emb(t) + c_i)     for each hidden layer
//! out = W_o h_L + b_o
//! ```
//!
//! where `emb` is the sinusoidal step embedding and the `V_i, c_i` heads exist only
//! when the network is time conditioned.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, TensorGrid};

const EMBEDDING_BASE: f64 = 10_000.0;

/// Interleaved sin/cos embedding of an integer diffusion step.
///
/// Entry `2k` is `sin(t * f_k)` and entry `2k + 1` is `cos(t * f_k)` with
/// `f_k = 10000^(-2k / dim)`.
pub fn time_embedding(t: usize, dim: usize, total_steps: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!("embedding dimension must be even and positive, got {dim}")));
    }
    if t > total_steps {
        return Err(Error::config(format!("step {t} exceeds total steps {total_steps}")));
    }
    let mut out = vec![0.0; dim];
    write_embedding(t, &mut out);
    Ok(out)
}

fn write_embedding(t: usize, out: &mut [f64]) {
    let dim = out.len();
    for k in 0..dim / 2 {
        let freq = EMBEDDING_BASE.powf(-((2 * k) as f64) / dim as f64);
        let arg = t as f64 * freq;
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
}

/// Architecture of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Width of the step embedding; zero means the network ignores time.
    pub time_dim: usize,
    /// Largest admissible diffusion step.
    pub total_steps: usize,
}

/// Diffusion steps fed alongside a batch.
#[derive(Debug, Clone, Copy)]
pub enum Steps<'a> {
    None,
    Shared(usize),
    PerRow(&'a [usize]),
}

#[derive(Debug, Clone, Copy)]
struct Slots {
    weight: usize,
    bias: usize,
    time: Option<(usize, usize)>,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            time_dim: 0,
            total_steps: 0,
        }
    }

    pub fn with_time(mut self, time_dim: usize, total_steps: usize) -> Self {
        self.time_dim = time_dim;
        self.total_steps = total_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config(format!("layer widths must be positive: {self:?}")));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::config(format!("time embedding width must be even, got {}", self.time_dim)));
        }
        if self.time_dim > 0 && self.hidden.is_empty() {
            return Err(Error::config("time conditioning needs at least one hidden layer"));
        }
        Ok(())
    }

    pub fn is_time_conditioned(&self) -> bool {
        self.time_dim > 0
    }

    fn layer_slots(&self) -> (Vec<Slots>, Slots) {
        let mut idx = 0;
        let mut hidden = Vec::with_capacity(self.hidden.len());
        for _ in &self.hidden {
            let weight = idx;
            let bias = idx + 1;
            idx += 2;
            let time = if self.time_dim > 0 {
                idx += 2;
                Some((idx - 2, idx - 1))
            } else {
                None
            };
            hidden.push(Slots { weight, bias, time });
        }
        (hidden, Slots { weight: idx, bias: idx + 1, time: None })
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        // (name, shape, fan_in)
        let mut out = Vec::new();
        let mut prev = self.input_dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            out.push((format!("hidden{i}.weight"), vec![h, prev], prev));
            out.push((format!("hidden{i}.bias"), vec![h], prev));
            if self.time_dim > 0 {
                out.push((format!("time{i}.weight"), vec![h, self.time_dim], self.time_dim));
                out.push((format!("time{i}.bias"), vec![h], self.time_dim));
            }
            prev = h;
        }
        out.push(("out.weight".into(), vec![self.output_dim, prev], prev));
        out.push(("out.bias".into(), vec![self.output_dim], prev));
        out
    }

    /// Parameters drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = self
            .layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n = shape.iter().product();
                let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                Ok((name, TensorGrid::new(shape, values)?))
            })
            .collect::<Result<Vec<_>>>()?;
        ParamSet::new(entries)
    }

    /// Check that `params` has exactly this architecture's names and shapes.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let layout = self.layout();
        if layout.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (pname, t)) in layout.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::config(format!(
                    "parameter `{pname}` {:?} does not match `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn embed(&self, steps: Steps<'_>, rows: usize) -> Result<Option<Array2<f64>>> {
        if self.time_dim == 0 {
            return Ok(None);
        }
        let check = |t: usize| {
            if t > self.total_steps {
                Err(Error::config(format!("step {t} exceeds total steps {}", self.total_steps)))
            } else {
                Ok(())
            }
        };
        match steps {
            Steps::None => Err(Error::config("time-conditioned network called without a step")),
            Steps::Shared(t) => {
                check(t)?;
                let mut e = Array2::zeros((1, self.time_dim));
                write_embedding(t, e.row_mut(0).as_slice_mut().expect("contiguous"));
                Ok(Some(e))
            }
            Steps::PerRow(ts) => {
                if ts.len() != rows {
                    return Err(Error::config(format!("{} steps for {rows} rows", ts.len())));
                }
                let mut e = Array2::zeros((rows, self.time_dim));
                for (mut row, &t) in e.rows_mut().into_iter().zip(ts) {
                    check(t)?;
                    write_embedding(t, row.as_slice_mut().expect("contiguous"));
                }
                Ok(Some(e))
            }
        }
    }

    /// Run the network and keep the intermediate activations for a backward pass.
    pub fn forward(&self, params: &ParamSet, input: ArrayView2<'_, f64>, steps: Steps<'_>) -> Result<Tape> {
        if input.ncols() != self.input_dim {
            return Err(Error::config(format!(
                "input has {} columns, network expects {}",
                input.ncols(),
                self.input_dim
            )));
        }
        let (hidden_slots, out_slots) = self.layer_slots();
        let emb = self.embed(steps, input.nrows())?;

        let mut inputs = Vec::with_capacity(self.hidden.len() + 1);
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut h = input.to_owned();
        for slots in &hidden_slots {
            let mut a = affine(params, slots, h.view())?;
            if let (Some((tw, tb)), Some(e)) = (slots.time, emb.as_ref()) {
                let te = e.dot(&params.tensor(tw).as_matrix()?.t()) + &bias_row(params.tensor(tb));
                a += &te;
            }
            let next = a.mapv(silu);
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(a);
        }
        let out = affine(params, &out_slots, h.view())?;
        inputs.push(h);
        Ok(Tape {
            spec: self.clone(),
            inputs,
            pre,
            emb,
            out,
        })
    }

    /// Forward pass without retaining intermediates.
    pub fn eval(&self, params: &ParamSet, input: ArrayView2<'_, f64>, steps: Steps<'_>) -> Result<Array2<f64>> {
        Ok(self.forward(params, input, steps)?.out)
    }
}

fn bias_row(b: &TensorGrid) -> Array1<f64> {
    Array1::from(b.values().to_vec())
}

fn affine(params: &ParamSet, slots: &Slots, h: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let w = params.tensor(slots.weight).as_matrix()?;
    Ok(h.dot(&w.t()) + &bias_row(params.tensor(slots.bias)))
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

pub(crate) fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

fn silu_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

/// Activations recorded by [`MlpSpec::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    spec: MlpSpec,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    emb: Option<Array2<f64>>,
    out: Array2<f64>,
}

/// Gradients of a scalar loss with respect to parameters and network input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamSet,
    pub input: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.out
    }

    pub fn into_output(self) -> Array2<f64> {
        self.out
    }

    /// Exact gradients given `d loss / d output`.
    pub fn backward(&self, params: &ParamSet, d_out: &Array2<f64>) -> Result<Gradients> {
        let mut grads = params.zeros_like();
        let input = self.backprop(params, d_out, Some(&mut grads))?;
        Ok(Gradients { params: grads, input })
    }

    /// Only `d loss / d input`; skips the parameter gradient products.
    pub fn input_gradient(&self, params: &ParamSet, d_out: &Array2<f64>) -> Result<Array2<f64>> {
        self.backprop(params, d_out, None)
    }

    fn backprop(&self, params: &ParamSet, d_out: &Array2<f64>, mut grads: Option<&mut ParamSet>) -> Result<Array2<f64>> {
        if d_out.dim() != self.out.dim() {
            return Err(Error::config(format!(
                "output gradient shape {:?} does not match output {:?}",
                d_out.dim(),
                self.out.dim()
            )));
        }
        let (hidden_slots, out_slots) = self.spec.layer_slots();
        let mut delta = d_out.clone();
        let layers = hidden_slots.len();
        for layer in (0..=layers).rev() {
            let slots = if layer == layers { out_slots } else { hidden_slots[layer] };
            if layer < layers {
                let a = &self.pre[layer];
                delta.zip_mut_with(a, |d, &a| *d *= silu_grad(a));
            }
            if let Some(g) = grads.as_deref_mut() {
                let h_in = &self.inputs[layer];
                accumulate(g.tensor_mut(slots.weight), &delta.t().dot(h_in))?;
                accumulate_vec(g.tensor_mut(slots.bias), &delta.sum_axis(Axis(0)))?;
                if let (Some((tw, tb)), Some(e)) = (slots.time, self.emb.as_ref()) {
                    let gw = if e.nrows() == 1 {
                        let col = delta.sum_axis(Axis(0)).insert_axis(Axis(1));
                        col.dot(e)
                    } else {
                        delta.t().dot(e)
                    };
                    accumulate(g.tensor_mut(tw), &gw)?;
                    accumulate_vec(g.tensor_mut(tb), &delta.sum_axis(Axis(0)))?;
                }
            }
            let w = params.tensor(slots.weight).as_matrix()?;
            delta = delta.dot(&w);
        }
        Ok(delta)
    }
}

fn accumulate(t: &mut TensorGrid, g: &Array2<f64>) -> Result<()> {
    let mut m = t.as_matrix_mut()?;
    m += g;
    Ok(())
}

fn accumulate_vec(t: &mut TensorGrid, g: &Array1<f64>) -> Result<()> {
    for (v, gv) in t.values_mut().iter_mut().zip(g.iter()) {
        *v += gv;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn embedding_at_zero() {
        assert_eq!(time_embedding(0, 4, 10).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_at_one() {
        let e = time_embedding(1, 4, 10).unwrap();
        let expected = [0.84147, 0.54030, 0.01000, 0.99995];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 5e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn embedding_rejects_odd_dim() {
        assert!(matches!(time_embedding(3, 5, 10), Err(Error::Config(_))));
        assert!(time_embedding(11, 4, 10).is_err());
    }

    #[test]
    fn embedding_injective_over_steps() {
        let total = 1000;
        let embs: Vec<Vec<f64>> = (0..=total).map(|t| time_embedding(t, 2, total).unwrap()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-9, "steps {i} and {j} collide");
            }
        }
    }

    #[test]
    fn identity_affine_layer() {
        let spec = MlpSpec::new(3, vec![], 3);
        let mut p = spec.init(0).unwrap();
        let eye = TensorGrid::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        p.set("out.weight", eye).unwrap();
        p.set("out.bias", TensorGrid::zeros(&[3])).unwrap();
        let x = array![[0.5, -2.0, 3.25]];
        assert_eq!(spec.eval(&p, x.view(), Steps::None).unwrap(), x);
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let spec = MlpSpec::new(4, vec![8, 8], 2).with_time(6, 100);
        let mut p = spec.init(3).unwrap();
        p.set("out.weight", TensorGrid::zeros(&[2, 8])).unwrap();
        p.set("out.bias", TensorGrid::zeros(&[2])).unwrap();
        let x = array![[1.0, 2.0, -3.0, 0.1], [9.0, -9.0, 0.0, 4.0]];
        let y = spec.eval(&p, x.view(), Steps::PerRow(&[5, 77])).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let spec = MlpSpec::new(4, vec![8], 2);
        let p = spec.init(0).unwrap();
        let x = Array2::zeros((2, 3));
        assert!(matches!(spec.forward(&p, x.view(), Steps::None), Err(Error::Config(_))));
        let other = MlpSpec::new(5, vec![8], 2).init(0).unwrap();
        assert!(spec.check_params(&other).is_err());
        assert!(spec.check_params(&p).is_ok());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = MlpSpec::new(16, vec![32], 4).with_time(8, 10);
        let a = spec.init(9).unwrap();
        assert_eq!(a, spec.init(9).unwrap());
        assert_ne!(a, spec.init(10).unwrap());
        let w = a.get("hidden0.weight").unwrap();
        assert!(w.values().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn shared_and_per_row_steps_agree() {
        let spec = MlpSpec::new(3, vec![5, 4], 3).with_time(4, 50);
        let p = spec.init(1).unwrap();
        let x = array![[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]];
        let a = spec.forward(&p, x.view(), Steps::Shared(17)).unwrap();
        let b = spec.forward(&p, x.view(), Steps::PerRow(&[17, 17])).unwrap();
        assert!((a.output() - b.output()).iter().all(|v| v.abs() < 1e-14));
        let d = array![[1.0, -1.0, 0.5], [0.2, 0.3, -0.7]];
        let ga = a.backward(&p, &d).unwrap();
        let gb = b.backward(&p, &d).unwrap();
        for ((_, ta), (_, tb)) in ga.params.iter().zip(gb.params.iter()) {
            for (u, v) in ta.values().iter().zip(tb.values()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
