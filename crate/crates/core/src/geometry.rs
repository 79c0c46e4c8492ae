//! Velocity-space decomposition of the flow-matching/contrastive gradient
//! interaction and its parameter-space cosine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientVector, VelocityField};
use crate::toyworld::WorldConfig;
use crate::vecops;

pub const G_TOTAL_TOL: f64 = 1e-10;

/// Velocity-level terms of `<u+ - v, v - u->`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityAlignment {
    pub inner_product: f64,
    /// `-||u+ - v||^2`
    pub self_interference: f64,
    /// `<u+ - v, delta>` with `delta = u+ - u-`
    pub separation: f64,
    /// `separation > ||u+ - v||^2`
    pub condition_met: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxedCondition {
    pub lhs: f64,
    pub rhs: f64,
    pub met: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub step: usize,
    pub inner_product: f64,
    pub self_interference: f64,
    pub separation: f64,
    pub condition_met: bool,
    pub relaxed_lhs: f64,
    pub relaxed_rhs: f64,
    pub relaxed_met: bool,
    /// `cos(g_FM, g_c)` over all parameters.
    pub cosine_param: f64,
    pub g_fm_norm: f64,
    pub g_c_norm: f64,
    /// `||(g_FM - g_c) - g_total||` with `g_total` from a joint backward pass.
    pub g_total_residual: f64,
}

pub fn grad_inner_product(u_pos: &[f64], v: &[f64], u_neg: &[f64]) -> Result<VelocityAlignment> {
    Error::check_dim(u_pos.len(), v.len())?;
    Error::check_dim(u_pos.len(), u_neg.len())?;
    let r = vecops::sub(u_pos, v);
    let delta = vecops::sub(u_pos, u_neg);
    let rr = vecops::norm_sq(&r);
    let separation = vecops::dot(&r, &delta);
    Ok(VelocityAlignment {
        inner_product: -rr + separation,
        self_interference: -rr,
        separation,
        condition_met: separation > rr,
    })
}

/// Coordinate mask of the physics block (`P_phys`); the rest is `P_perp`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsProjection {
    pub mask: Vec<bool>,
}

impl PhysicsProjection {
    pub fn for_world(world: &WorldConfig) -> Self {
        Self {
            mask: world.position_mask(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn phys(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mask)
            .map(|(v, &m)| if m { *v } else { 0.0 })
            .collect()
    }

    pub fn perp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mask)
            .map(|(v, &m)| if m { 0.0 } else { *v })
            .collect()
    }
}

pub fn relaxed_condition(
    u_pos: &[f64],
    v: &[f64],
    delta: &[f64],
    proj: &PhysicsProjection,
) -> Result<RelaxedCondition> {
    Error::check_dim(proj.dim(), u_pos.len())?;
    Error::check_dim(proj.dim(), v.len())?;
    Error::check_dim(proj.dim(), delta.len())?;
    let r = vecops::sub(u_pos, v);
    let rp = vecops::norm(&proj.phys(&r));
    let lhs = rp * vecops::norm(delta);
    let rhs = rp * rp + vecops::norm_sq(&proj.perp(&r));
    Ok(RelaxedCondition {
        lhs,
        rhs,
        met: lhs >= rhs,
    })
}

/// Cosine of two parameter gradients; 0 when either is the zero vector.
pub fn cosine_alignment(g_fm: &GradientVector, g_c: &GradientVector) -> Result<f64> {
    Error::check_dim(g_fm.len(), g_c.len())?;
    Ok(vecops::cosine(&g_fm.0, &g_c.0))
}

/// One training example as seen by the alignment probe.
#[derive(Clone, Debug)]
pub struct AlignmentSample {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub z: Vec<f64>,
    pub u_pos: Vec<f64>,
    pub u_neg: Vec<f64>,
}

/// Separate backward passes for the batch-mean flow-matching loss and for
/// `lambda` times the batch-mean contrastive loss. Velocity-level fields
/// treat the batch as one concatenated vector scaled by `1/B`.
pub fn measure_step_alignment(
    model: &VelocityField,
    batch: &[AlignmentSample],
    lambda: f64,
    proj: &PhysicsProjection,
    step: usize,
) -> Result<AlignmentReport> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("alignment probe on an empty batch".into()));
    }
    let n = model.param_count();
    let inv_b = 1.0 / batch.len() as f64;
    let mut g_fm = GradientVector::zeros(n);
    let mut g_c = GradientVector::zeros(n);
    let mut g_total = GradientVector::zeros(n);
    let (mut u_all, mut v_all, mut n_all) = (Vec::new(), Vec::new(), Vec::new());
    let mut mask = Vec::new();
    for s in batch {
        let v = model.forward(&s.x_t, s.t, &s.z)?;
        let r_pos = vecops::sub(&v, &s.u_pos);
        let r_neg = vecops::sub(&v, &s.u_neg);
        let up_fm = vecops::scale(&r_pos, 2.0 * inv_b);
        let up_c = vecops::scale(&r_neg, 2.0 * lambda * inv_b);
        let up_total: Vec<f64> = up_fm.iter().zip(&up_c).map(|(a, b)| a - b).collect();
        model.backward_into(&s.x_t, s.t, &s.z, &up_fm, &mut g_fm.0)?;
        model.backward_into(&s.x_t, s.t, &s.z, &up_c, &mut g_c.0)?;
        model.backward_into(&s.x_t, s.t, &s.z, &up_total, &mut g_total.0)?;
        u_all.extend_from_slice(&s.u_pos);
        v_all.extend_from_slice(&v);
        n_all.extend_from_slice(&s.u_neg);
        mask.extend_from_slice(&proj.mask);
    }
    let residual = g_fm
        .0
        .iter()
        .zip(&g_c.0)
        .zip(&g_total.0)
        .map(|((f, c), t)| (f - c - t).powi(2))
        .sum::<f64>()
        .sqrt();
    if residual > G_TOTAL_TOL {
        return Err(Error::Precondition(format!(
            "g_total disagrees with g_FM - g_c by {residual:e} at step {step}"
        )));
    }
    if !(g_fm.is_finite() && g_c.is_finite()) {
        return Err(Error::NonFinite {
            what: "alignment gradients",
            step,
        });
    }
    let vel = grad_inner_product(&u_all, &v_all, &n_all)?;
    let delta = vecops::sub(&u_all, &n_all);
    let relaxed = relaxed_condition(&u_all, &v_all, &delta, &PhysicsProjection { mask })?;
    Ok(AlignmentReport {
        step,
        inner_product: vel.inner_product * inv_b,
        self_interference: vel.self_interference * inv_b,
        separation: vel.separation * inv_b,
        condition_met: vel.condition_met,
        relaxed_lhs: relaxed.lhs * inv_b,
        relaxed_rhs: relaxed.rhs * inv_b,
        relaxed_met: relaxed.met,
        cosine_param: cosine_alignment(&g_fm, &g_c)?,
        g_fm_norm: g_fm.norm(),
        g_c_norm: g_c.norm(),
        g_total_residual: residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn zero_gap_opposes() {
        let u = [1.0, 2.0, -1.0];
        let v = [0.0, 1.0, 0.5];
        let a = grad_inner_product(&u, &v, &u).unwrap();
        let rr = vecops::dist_sq(&u, &v);
        assert_eq!(a.inner_product, -rr);
        assert!(!a.condition_met);
    }

    #[test]
    fn zero_residual() {
        let a = grad_inner_product(&[1.0, 2.0], &[1.0, 2.0], &[5.0, -3.0]).unwrap();
        assert_eq!((a.inner_product, a.separation), (0.0, 0.0));
    }

    #[test]
    fn hand_example_both_ways() {
        let (u, v, n) = ([1.0, 0.0], [0.0, 0.0], [0.0, 1.0]);
        let a = grad_inner_product(&u, &v, &n).unwrap();
        assert_eq!(a.self_interference, -1.0);
        assert_eq!(a.separation, 1.0);
        assert_eq!(a.inner_product, 0.0);
        let direct = vecops::dot(&vecops::sub(&u, &v), &vecops::sub(&v, &n));
        assert_eq!(direct, 0.0);
    }

    proptest! {
        #[test]
        fn identity_holds(seed in any::<u64>(), dim in 1usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (u, v, n) = (randn(&mut rng, dim), randn(&mut rng, dim), randn(&mut rng, dim));
            let a = grad_inner_product(&u, &v, &n).unwrap();
            let direct = vecops::dot(&vecops::sub(&u, &v), &vecops::sub(&v, &n));
            prop_assert!((a.inner_product - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
            prop_assert!((a.inner_product - (a.self_interference + a.separation)).abs() <= 1e-12);
        }

        #[test]
        fn scale_covariance(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (u, v, n) = (randn(&mut rng, 8), randn(&mut rng, 8), randn(&mut rng, 8));
            let a = grad_inner_product(&u, &v, &n).unwrap();
            let b = grad_inner_product(&vecops::scale(&u, c), &vecops::scale(&v, c), &vecops::scale(&n, c)).unwrap();
            prop_assert!((b.inner_product - c * c * a.inner_product).abs() <= 1e-9 * (1.0 + (c * c * a.inner_product).abs()));
            prop_assert_eq!(a.condition_met, b.condition_met);
        }

        #[test]
        fn projection_pythagoras(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let proj = PhysicsProjection::for_world(&WorldConfig::default());
            let x = randn(&mut rng, proj.dim());
            let p = proj.phys(&x);
            prop_assert_eq!(proj.phys(&p), p.clone());
            let split = vecops::norm_sq(&p) + vecops::norm_sq(&proj.perp(&x));
            prop_assert!((vecops::norm_sq(&x) - split).abs() <= 1e-12);
        }
    }

    #[test]
    fn shrinking_gap_eventually_fails() {
        let u = [1.0, 0.0, 0.0];
        let v = [0.0, 0.0, 0.0];
        let mut last = true;
        for k in 0..40 {
            let d = 10.0 * 0.5f64.powi(k);
            let n = [1.0 - d, 0.0, 0.0];
            last = grad_inner_product(&u, &v, &n).unwrap().condition_met;
        }
        assert!(!last);
    }

    #[test]
    fn relaxed_cases() {
        let proj = PhysicsProjection {
            mask: vec![false, false, true, true],
        };
        let r = relaxed_condition(&[1.0; 4], &[1.0; 4], &[3.0, 0.0, 1.0, 0.0], &proj).unwrap();
        assert_eq!((r.lhs, r.rhs, r.met), (0.0, 0.0, true));

        let r = relaxed_condition(&[1.0, 2.0, 0.0, 0.0], &[0.0; 4], &[5.0, 5.0, 5.0, 5.0], &proj).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(!r.met);

        // residual in the physics block, delta twice as long along it
        let res = [0.0, 0.0, 3.0, 4.0];
        let delta = [0.0, 0.0, 6.0, 8.0];
        let r = relaxed_condition(&res, &[0.0; 4], &delta, &proj).unwrap();
        assert!((r.lhs - 50.0).abs() < 1e-12);
        assert!((r.rhs - 25.0).abs() < 1e-12);
        assert!(r.met);
    }

    #[test]
    fn cosine_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = GradientVector(randn(&mut rng, 50));
        let neg = GradientVector(vecops::scale(&g.0, -1.0));
        assert!((cosine_alignment(&g, &g).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_alignment(&g, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_alignment(&g, &GradientVector::zeros(50)).unwrap(), 0.0);
        let h = GradientVector(randn(&mut rng, 50));
        let (mut d, mut a, mut b) = (0.0, 0.0, 0.0);
        for i in 0..50 {
            d += g.0[i] * h.0[i];
            a += g.0[i] * g.0[i];
            b += h.0[i] * h.0[i];
        }
        assert!((cosine_alignment(&g, &h).unwrap() - d / (a.sqrt() * b.sqrt())).abs() <= 1e-12);
    }

    fn probe(seed: u64, dup: bool) -> (VelocityField, Vec<AlignmentSample>) {
        let world = WorldConfig {
            scene_dim: 2,
            steps: 4,
            ..WorldConfig::default()
        };
        let m = VelocityField::new(Architecture::new(world.data_dim(), 3, vec![8, 8]), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = (0..4)
            .map(|_| {
                let u_pos = randn(&mut rng, 6);
                AlignmentSample {
                    x_t: randn(&mut rng, 6),
                    t: rng.random(),
                    z: randn(&mut rng, 3),
                    u_neg: if dup { u_pos.clone() } else { randn(&mut rng, 6) },
                    u_pos,
                }
            })
            .collect();
        (m, batch)
    }

    #[test]
    fn measure_zero_lambda_and_duplicate() {
        let proj = PhysicsProjection {
            mask: vec![false, false, true, true, true, true],
        };
        let (m, batch) = probe(1, false);
        let r = measure_step_alignment(&m, &batch, 0.0, &proj, 7).unwrap();
        assert_eq!(r.cosine_param, 0.0);
        assert_eq!(r.g_c_norm, 0.0);
        assert_eq!(r.step, 7);

        let (m, batch) = probe(2, true);
        let r = measure_step_alignment(&m, &batch, 0.3, &proj, 0).unwrap();
        assert!((r.inner_product - r.self_interference).abs() <= 1e-12);
        assert_eq!(r.separation, 0.0);
        assert!(r.g_total_residual <= G_TOTAL_TOL);
        // duplicate negative: contrastive gradient is a positive multiple of g_FM
        assert!((r.cosine_param - 1.0).abs() < 1e-12);
    }

    #[test]
    fn measure_identity_and_residual() {
        let proj = PhysicsProjection {
            mask: vec![false, false, true, true, true, true],
        };
        for seed in 0..10 {
            let (m, batch) = probe(seed, false);
            let r = measure_step_alignment(&m, &batch, 0.005, &proj, 0).unwrap();
            assert!((r.inner_product - (r.self_interference + r.separation)).abs() <= 1e-12);
            assert!(r.g_total_residual <= G_TOTAL_TOL);
            assert!((-1.0..=1.0).contains(&r.cosine_param));
        }
    }
}
