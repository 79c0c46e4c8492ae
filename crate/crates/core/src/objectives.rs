//! Scalar losses over one predicted velocity and their gradients with
//! respect to that velocity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecops;

pub const DEFAULT_LOSS_CAP: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub rand: f64,
    pub hard: f64,
    pub anc: f64,
}

impl Lambdas {
    pub const ZERO: Lambdas = Lambdas {
        rand: 0.0,
        hard: 0.0,
        anc: 0.0,
    };

    pub const DIRECT: Lambdas = Lambdas {
        rand: 0.005,
        hard: 0.02,
        anc: 0.2,
    };

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("lambdas.rand", self.rand), ("lambdas.hard", self.hard)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::OutOfRange {
                    what,
                    value: v,
                    range: "[0, 1)",
                });
            }
        }
        if !(self.anc >= 0.0 && self.anc.is_finite()) {
            return Err(Error::OutOfRange {
                what: "lambdas.anc",
                value: self.anc,
                range: "[0, inf)",
            });
        }
        Ok(())
    }
}

impl Default for Lambdas {
    fn default() -> Self {
        Self::DIRECT
    }
}

/// Unweighted terms plus the weighted total of one sample or a batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fm: f64,
    pub l_rand: f64,
    pub l_hard: f64,
    pub l_anchor: f64,
    pub total: f64,
    pub masked: bool,
    pub lambdas: Option<Lambdas>,
}

impl LossBreakdown {
    /// `fm - lr * l_rand - lh * l_hard + la * l_anchor`.
    pub fn recompose(&self) -> f64 {
        let l = self.lambdas.unwrap_or(Lambdas::ZERO);
        self.fm - l.rand * self.l_rand - l.hard * self.l_hard + l.anc * self.l_anchor
    }
}

/// `(||v - target||^2, 2 (v - target))`.
fn sq_residual(v: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    Error::check_dim(v.len(), target.len())?;
    let r = vecops::sub(v, target);
    Ok((vecops::norm_sq(&r), vecops::scale(&r, 2.0)))
}

pub fn fm_loss(v: &[f64], u_pos: &[f64]) -> Result<(f64, Vec<f64>)> {
    sq_residual(v, u_pos)
}

/// `||v - u+||^2 - lambda ||v - u-||^2`.
pub fn delta_fm_loss(v: &[f64], u_pos: &[f64], u_neg: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::OutOfRange {
            what: "lambda",
            value: lambda,
            range: "[0, 1)",
        });
    }
    let (pos, mut g) = sq_residual(v, u_pos)?;
    let (neg, gn) = sq_residual(v, u_neg)?;
    vecops::axpy(&mut g, -lambda, &gn);
    Ok((pos - lambda * neg, g))
}

/// `||v - v_ref||^2`; `v_ref` is a constant.
pub fn anchor_loss(v: &[f64], v_ref: &[f64]) -> Result<(f64, Vec<f64>)> {
    sq_residual(v, v_ref)
}

/// Full objective. A missing term contributes nothing and reports 0.
pub fn direct_loss(
    v: &[f64],
    u_pos: &[f64],
    u_neg_rand: Option<&[f64]>,
    u_neg_hard: Option<&[f64]>,
    v_ref: Option<&[f64]>,
    lambdas: Lambdas,
) -> Result<(LossBreakdown, Vec<f64>)> {
    lambdas.validate()?;
    let (fm, mut grad) = fm_loss(v, u_pos)?;
    let mut out = LossBreakdown {
        fm,
        lambdas: Some(lambdas),
        ..LossBreakdown::default()
    };
    if let Some(u) = u_neg_rand {
        let (l, g) = sq_residual(v, u)?;
        out.l_rand = l;
        vecops::axpy(&mut grad, -lambdas.rand, &g);
    }
    if let Some(u) = u_neg_hard {
        let (l, g) = sq_residual(v, u)?;
        out.l_hard = l;
        vecops::axpy(&mut grad, -lambdas.hard, &g);
    }
    if let Some(r) = v_ref {
        let (l, g) = anchor_loss(v, r)?;
        out.l_anchor = l;
        vecops::axpy(&mut grad, lambdas.anc, &g);
    }
    out.total = out.recompose();
    Ok((out, grad))
}

/// `(0, true)` when `total > cap`, else `(total, false)`.
pub fn mask_loss(total: f64, cap: f64) -> (f64, bool) {
    if total > cap {
        (0.0, true)
    } else {
        (total, false)
    }
}
