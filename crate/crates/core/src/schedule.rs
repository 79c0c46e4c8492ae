//! Probability-path interpolants `x_t = alpha(t) x + sigma(t) eps` and their
//! target velocities `u = alpha'(t) x + sigma'(t) eps`.
//!
//! `t = 0` is pure noise and `t = 1` is data for every schedule.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `alpha = t`, `sigma = 1 - t`; the target velocity is `x - eps`.
    #[default]
    Linear,
    /// `alpha = sin(pi t / 2)`, `sigma = cos(pi t / 2)`.
    Cosine,
}

impl Schedule {
    pub const ALL: [Schedule; 2] = [Schedule::Linear, Schedule::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Linear => "linear",
            Schedule::Cosine => "cosine",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown schedule `{name}`")))
    }

    pub fn alpha(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
            Schedule::Cosine => (FRAC_PI_2 * t).sin(),
        }
    }

    pub fn sigma(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0 - t,
            Schedule::Cosine => (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn dalpha(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0,
            Schedule::Cosine => FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn dsigma(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => -1.0,
            Schedule::Cosine => -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
        }
    }
}

fn check_inputs(x_hat: &[f64], eps: &[f64], t: f64) -> Result<()> {
    Error::check_dim(x_hat.len(), eps.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange {
            what: "t",
            value: t,
            range: "[0, 1]",
        });
    }
    Ok(())
}

fn combine(a: f64, x: &[f64], b: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| a * xi + b * yi).collect()
}

pub fn interpolate(x_hat: &[f64], eps: &[f64], t: f64, sched: Schedule) -> Result<Vec<f64>> {
    check_inputs(x_hat, eps, t)?;
    Ok(combine(sched.alpha(t), x_hat, sched.sigma(t), eps))
}

pub fn target_velocity(x_hat: &[f64], eps: &[f64], t: f64, sched: Schedule) -> Result<Vec<f64>> {
    check_inputs(x_hat, eps, t)?;
    Ok(combine(sched.dalpha(t), x_hat, sched.dsigma(t), eps))
}
