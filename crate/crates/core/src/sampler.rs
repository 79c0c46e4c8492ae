//! Euler integration of a learned velocity field from noise at t=0 to data
//! at t=1, with optional classifier-free guidance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VelocityField;
use crate::toyworld::TrajectorySample;
use crate::vecops;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 5.0;

/// Anything that can be integrated: the trained network or a stub field.
pub trait VelocityFn {
    fn data_dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>>;
    /// Prediction with the null condition.
    fn velocity_uncond(&self, x: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>> {
        self.velocity(x, t, &vec![0.0; z.len()])
    }
    fn supports_guidance(&self) -> bool {
        true
    }
}

impl VelocityFn for VelocityField {
    fn data_dim(&self) -> usize {
        self.arch().data_dim
    }
    fn velocity(&self, x: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>> {
        self.forward(x, t, z)
    }
    fn supports_guidance(&self) -> bool {
        self.guidance_ready
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance: None,
        }
    }
}

pub fn cfg_combine(v_cond: &[f64], v_uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    Error::check_dim(v_cond.len(), v_uncond.len())?;
    Ok(v_cond
        .iter()
        .zip(v_uncond)
        .map(|(c, u)| u + scale * (c - u))
        .collect())
}

pub fn initial_noise(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Integrates from a given state `x0` at t=0 to t=1 on a uniform grid.
pub fn euler_integrate<F: VelocityFn + ?Sized>(
    field: &F,
    x0: Vec<f64>,
    z: &[f64],
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    if cfg.steps == 0 {
        return Err(Error::InvalidParameter("sampler steps must be >= 1".into()));
    }
    Error::check_dim(field.data_dim(), x0.len())?;
    if let Some(s) = cfg.guidance {
        if !s.is_finite() {
            return Err(Error::InvalidParameter(format!("guidance scale {s}")));
        }
        if !field.supports_guidance() {
            return Err(Error::Precondition(
                "guidance needs a model trained with condition dropout".into(),
            ));
        }
    }
    let dt = 1.0 / cfg.steps as f64;
    let mut x = x0;
    for k in 0..cfg.steps {
        let t = k as f64 * dt;
        let v = match cfg.guidance {
            None => field.velocity(&x, t, z)?,
            Some(s) => cfg_combine(
                &field.velocity(&x, t, z)?,
                &field.velocity_uncond(&x, t, z)?,
                s,
            )?,
        };
        vecops::axpy(&mut x, dt, &v);
        if !vecops::all_finite(&x) {
            return Err(Error::NonFinite {
                what: "sampler state",
                step: k,
            });
        }
    }
    Ok(x)
}

/// Draws `x0 ~ N(0, I)` from `seed` and integrates; returns the flat sample.
pub fn euler_sample_flat<F: VelocityFn + ?Sized>(
    field: &F,
    z: &[f64],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    euler_integrate(field, initial_noise(field.data_dim(), seed), z, cfg)
}

pub fn euler_sample<F: VelocityFn + ?Sized>(
    field: &F,
    z: &[f64],
    cfg: &SamplerConfig,
    seed: u64,
    scene_dim: usize,
) -> Result<TrajectorySample> {
    TrajectorySample::from_flat(&euler_sample_flat(field, z, cfg, seed)?, scene_dim)
}
