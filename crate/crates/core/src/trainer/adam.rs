use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::OutOfRange {
                what: "lr",
                value: self.lr,
                range: "(0, inf)",
            });
        }
        for (what, b) in [("betas[0]", self.beta1), ("betas[1]", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::OutOfRange {
                    what,
                    value: b,
                    range: "[0, 1)",
                });
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter("eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay. A non-finite
/// gradient leaves params and state untouched and returns `Ok(false)`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<bool> {
    Error::check_dim(params.len(), grads.len())?;
    Error::check_dim(params.len(), state.m.len())?;
    Error::check_dim(params.len(), state.v.len())?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(false);
    }
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    let decay = 1.0 - hyper.lr * hyper.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * decay - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = AdamState::new(3);
        for _ in 0..10 {
            assert!(adam_step(&mut p, &[0.0; 3], &mut s, &AdamHyper::default()).unwrap());
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_is_sign_like() {
        let h = AdamHyper {
            lr: 0.01,
            ..AdamHyper::default()
        };
        let g = [0.5, -3.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &g, &mut s, &h).unwrap();
        for i in 0..3 {
            let want = -h.lr * g[i] / (g[i].abs() + h.eps);
            assert!((p[i] - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn constant_gradient_matches_moment_recurrence() {
        let h = AdamHyper {
            lr: 0.1,
            ..AdamHyper::default()
        };
        let g = 0.3;
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let mut prev = 0.0;
        for t in 1..=2000 {
            adam_step(&mut p, &[g], &mut s, &h).unwrap();
            // closed form: m_t = g (1 - b1^t), v_t = g^2 (1 - b2^t); bias correction
            // recovers g and g^2 exactly
            let m = g * (1.0 - h.beta1.powi(t)) / (1.0 - h.beta1.powi(t));
            let v = g * g * (1.0 - h.beta2.powi(t)) / (1.0 - h.beta2.powi(t));
            let step = h.lr * m / (v.sqrt() + h.eps);
            assert!(((prev - p[0]) - step).abs() <= 1e-12);
            prev = p[0];
        }
        let last = {
            let before = p[0];
            adam_step(&mut p, &[g], &mut s, &h).unwrap();
            before - p[0]
        };
        assert!((last - h.lr).abs() < 1e-6);
    }

    #[test]
    fn decoupled_weight_decay() {
        let h = AdamHyper {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamHyper::default()
        };
        let mut p = vec![2.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.0], &mut s, &h).unwrap();
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = vec![1.0, 1.0];
        let mut s = AdamState::new(2);
        let ok = adam_step(&mut p, &[f64::NAN, 1.0], &mut s, &AdamHyper::default()).unwrap();
        assert!(!ok);
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(s, AdamState::new(2));
    }
}
