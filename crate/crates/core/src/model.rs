//! Conditional velocity field `v(x_t, t, z)`: an MLP over
//! `[x_t | t, sin 2 pi t, cos 2 pi t | z]` with tanh hidden layers and a
//! linear output, plus its exact reverse-mode gradient.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::hash_f64s;
use crate::vecops;

pub const TIME_FEATURES: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn new(data_dim: usize, cond_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            data_dim,
            cond_dim,
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + TIME_FEATURES + self.cond_dim
    }

    /// `(fan_in, fan_out)` per layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.data_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }
}

/// Flattened gradient in canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        vecops::norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        vecops::all_finite(&self.0)
    }
}

/// Per-layer activations kept for the backward pass.
struct Trace {
    /// `inputs[l]` is what layer `l` consumed; the last hidden output is
    /// `inputs[L-1]`.
    inputs: Vec<Vec<f64>>,
    output: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    arch: Architecture,
    params: Vec<f64>,
    /// Trained with condition dropout, so the null condition is meaningful.
    pub guidance_ready: bool,
}

impl VelocityField {
    /// Glorot-uniform weights, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        for (fan_in, fan_out) in arch.layer_shapes() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            arch,
            params,
            guidance_ready: false,
        }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count();
        Self {
            arch,
            params: vec![0.0; n],
            guidance_ready: false,
        }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        Error::check_dim(arch.param_count(), params.len())?;
        Ok(Self {
            arch,
            params,
            guidance_ready: false,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_hash(&self) -> String {
        hash_f64s(&self.params)
    }

    /// Offset of the output-layer bias block in the flat parameter vector.
    pub fn output_bias_range(&self) -> std::ops::Range<usize> {
        let n = self.params.len();
        n - self.arch.data_dim..n
    }

    fn input(&self, x_t: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.arch.data_dim, x_t.len())?;
        Error::check_dim(self.arch.cond_dim, z.len())?;
        let mut h = Vec::with_capacity(self.arch.input_dim());
        h.extend_from_slice(x_t);
        h.extend_from_slice(&[t, (TAU * t).sin(), (TAU * t).cos()]);
        h.extend_from_slice(z);
        Ok(h)
    }

    fn run(&self, x_t: &[f64], t: f64, z: &[f64]) -> Result<Trace> {
        let shapes = self.arch.layer_shapes();
        let last = shapes.len() - 1;
        let mut inputs = Vec::with_capacity(shapes.len());
        let mut h = self.input(x_t, t, z)?;
        let mut off = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let mut a: Vec<f64> = w
                .chunks_exact(fan_in)
                .zip(b)
                .map(|(row, bi)| vecops::dot(row, &h) + bi)
                .collect();
            if l != last {
                a.iter_mut().for_each(|x| *x = x.tanh());
            }
            inputs.push(std::mem::replace(&mut h, a));
        }
        Ok(Trace { inputs, output: h })
    }

    pub fn forward(&self, x_t: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(x_t, t, z)?.output)
    }

    /// Gradient of `<upstream, forward(x_t, t, z)>` with respect to all
    /// parameters.
    pub fn backward(
        &self,
        x_t: &[f64],
        t: f64,
        z: &[f64],
        upstream: &[f64],
    ) -> Result<GradientVector> {
        let mut g = GradientVector::zeros(self.param_count());
        self.backward_into(x_t, t, z, upstream, &mut g.0)?;
        Ok(g)
    }

    /// Accumulates the gradient of `<upstream, v>` into `grad`; returns `v`.
    pub fn backward_into(
        &self,
        x_t: &[f64],
        t: f64,
        z: &[f64],
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        Error::check_dim(self.arch.data_dim, upstream.len())?;
        Error::check_dim(self.params.len(), grad.len())?;
        let trace = self.run(x_t, t, z)?;
        self.backprop(&trace, upstream, grad);
        Ok(trace.output)
    }

    fn backprop(&self, trace: &Trace, upstream: &[f64], grad: &mut [f64]) {
        let shapes = self.arch.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for &(i, o) in &shapes {
            offsets.push(off);
            off += i * o + o;
        }
        let mut delta = upstream.to_vec();
        for l in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            let w_off = offsets[l];
            let b_off = w_off + fan_in * fan_out;
            let h = &trace.inputs[l];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                vecops::axpy(&mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in], *d, h);
                grad[b_off + o] += d;
            }
            if l == 0 {
                break;
            }
            // through W^T, then through tanh (h = tanh(a) so dh/da = 1 - h^2)
            let w = &self.params[w_off..b_off];
            let mut back = vec![0.0; fan_in];
            for (row, d) in w.chunks_exact(fan_in).zip(&delta) {
                vecops::axpy(&mut back, *d, row);
            }
            for (b, hv) in back.iter_mut().zip(h) {
                *b *= 1.0 - hv * hv;
            }
            delta = back;
        }
    }

    /// Largest singular value bound per layer (Frobenius norms), used for a
    /// crude Lipschitz constant.
    pub fn lipschitz_bound(&self) -> f64 {
        let mut off = 0;
        let mut bound = 1.0;
        for (i, o) in self.arch.layer_shapes() {
            bound *= vecops::norm(&self.params[off..off + i * o]);
            off += i * o + o;
        }
        bound
    }
}

/// Central-difference gradient of `loss_fn` at `model`'s parameters.
pub fn finite_diff_grad<F>(loss_fn: F, model: &VelocityField, h: f64) -> Result<GradientVector>
where
    F: Fn(&VelocityField) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step h must be positive, got {h}")));
    }
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.param_count());
    for i in 0..model.param_count() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = loss_fn(&probe)?;
        probe.params[i] = orig - h;
        let dn = loss_fn(&probe)?;
        probe.params[i] = orig;
        out.push((up - dn) / (2.0 * h));
    }
    Ok(GradientVector(out))
}

pub const CHECKPOINT_FORMAT: &str = "direct-flow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model plus the trainer state needed to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub guidance_ready: bool,
    pub step: usize,
    pub params: Vec<f64>,
    /// Trainer RNG streams, opaque to the model.
    #[serde(default)]
    pub rng: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn of(model: &VelocityField, step: usize, rng: Option<serde_json::Value>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: model.arch.clone(),
            guidance_ready: model.guidance_ready,
            step,
            params: model.params.clone(),
            rng,
        }
    }

    pub fn model(&self) -> Result<VelocityField> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::ArchitectureMismatch(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut m = VelocityField::from_params(self.architecture.clone(), self.params.clone())?;
        m.guidance_ready = self.guidance_ready;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Loads and checks the stored architecture against `expected`.
    pub fn load_expecting(path: &Path, expected: &Architecture) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.architecture != expected {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint has {:?}, run expects {:?}",
                ck.architecture, expected
            )));
        }
        Ok(ck)
    }
}
