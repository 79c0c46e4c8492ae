use serde::{Deserialize, Serialize};

use super::{PhysicsParams, Profile, TrajectorySample, WorldConfig};

/// Tolerance for floor penetration and energy increase.
pub const PHYSICS_TOL: f64 = 1e-9;

/// Physical plausibility of one trajectory under its conditioning physics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Fraction of steps below the floor.
    pub penetration_rate: f64,
    /// Fraction of checked free-flight step pairs where energy grows.
    pub energy_violation_rate: f64,
    /// Fraction of free-fall segments accelerating along gravity.
    pub direction_consistency: f64,
}

impl ScoreReport {
    /// Mean violation over the three checks; 0 is perfect, 1 is worst.
    pub fn composite(&self) -> f64 {
        (self.penetration_rate + self.energy_violation_rate + (1.0 - self.direction_consistency))
            / 3.0
    }

    pub fn mean(reports: &[ScoreReport]) -> ScoreReport {
        if reports.is_empty() {
            return ScoreReport::default();
        }
        let n = reports.len() as f64;
        let mut acc = ScoreReport::default();
        for r in reports {
            acc.penetration_rate += r.penetration_rate / n;
            acc.energy_violation_rate += r.energy_violation_rate / n;
            acc.direction_consistency += r.direction_consistency / n;
        }
        acc
    }
}

/// Scores a trajectory against the physics it was conditioned on.
///
/// Velocities are finite differences of consecutive heights (the first one
/// from the start height) and energy is `v^2/2 - gravity * height`. Energy and
/// direction are only judged on free-flight windows: steps receiving the
/// gradual drive are excluded, as is any window next to an upward velocity
/// reversal (a floor contact). Degenerate inputs still produce a report.
pub fn physics_score(
    traj: &TrajectorySample,
    params: &PhysicsParams,
    world: &WorldConfig,
) -> ScoreReport {
    let pos = &traj.positions;
    let n = pos.len();
    if n == 0 {
        return ScoreReport {
            penetration_rate: 0.0,
            energy_violation_rate: 0.0,
            direction_consistency: 1.0,
        };
    }
    let penetration_rate =
        pos.iter().filter(|&&p| p < -PHYSICS_TOL).count() as f64 / n as f64;

    let dt = world.dt;
    let g = params.gravity;
    let mut prev = world.start_height;
    let vel: Vec<f64> = pos
        .iter()
        .map(|&p| {
            let v = (p - prev) / dt;
            prev = p;
            v
        })
        .collect();
    let energy: Vec<f64> = vel
        .iter()
        .zip(pos)
        .map(|(v, p)| 0.5 * v * v - g * p)
        .collect();

    // reversal[k]: velocity turns from downward to upward between k and k+1
    let reversal: Vec<bool> = (0..n.saturating_sub(1))
        .map(|k| vel[k] < 0.0 && vel[k + 1] >= 0.0)
        .collect();
    let near_reversal = |k: usize| {
        let lo = k.saturating_sub(1);
        let hi = (k + 1).min(reversal.len().saturating_sub(1));
        (lo..=hi).any(|j| reversal.get(j).copied().unwrap_or(false))
    };
    let ramp = world.ramp_steps();
    let driven = |k: usize| params.profile == Profile::Gradual && k < ramp;

    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut segments = 0usize;
    let mut consistent = 0usize;
    for k in 0..n.saturating_sub(1) {
        if driven(k + 1) || near_reversal(k) {
            continue;
        }
        checked += 1;
        if energy[k + 1] - energy[k] > PHYSICS_TOL {
            violations += 1;
        }
        if g != 0.0 {
            segments += 1;
            let accel = (vel[k + 1] - vel[k]) / dt;
            if accel != 0.0 && accel.signum() == g.signum() {
                consistent += 1;
            }
        }
    }

    ScoreReport {
        penetration_rate,
        energy_violation_rate: if checked == 0 {
            0.0
        } else {
            violations as f64 / checked as f64
        },
        direction_consistency: if segments == 0 {
            1.0
        } else {
            consistent as f64 / segments as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn traj(positions: Vec<f64>) -> TrajectorySample {
        TrajectorySample {
            appearance: vec![0.0; 8],
            positions,
        }
    }

    fn falling() -> PhysicsParams {
        PhysicsParams {
            gravity: -1.0,
            restitution: 0.5,
            drag: 0.0,
            speed: 0.5,
            profile: Profile::Sudden,
        }
    }

    #[test]
    fn single_penetration_counts_once() {
        let mut p = vec![0.5; 16];
        p[7] = -0.5;
        let s = physics_score(&traj(p), &falling(), &WorldConfig::default());
        assert_eq!(s.penetration_rate, 1.0 / 16.0);
    }

    #[test]
    fn degenerate_inputs_do_not_panic() {
        let w = WorldConfig::default();
        let s = physics_score(&traj(vec![]), &falling(), &w);
        assert_eq!(s.composite(), 0.0);
        let s = physics_score(&traj(vec![f64::NAN; 16]), &falling(), &w);
        assert!(s.penetration_rate.is_finite());
        let s = physics_score(&traj(vec![0.3]), &falling(), &w);
        assert_eq!(s.energy_violation_rate, 0.0);
    }

    /// Independent per-segment oracle: walks the raw heights window by
    /// window without sharing any intermediate arrays with the scorer.
    fn oracle_direction(pos: &[f64], g: f64, w: &WorldConfig) -> f64 {
        let h = |i: isize| if i < 0 { w.start_height } else { pos[i as usize] };
        let vel = |k: isize| (h(k) - h(k - 1)) / w.dt;
        let reversal_at = |j: isize| j >= 0 && (j as usize) + 1 < pos.len() && vel(j) < 0.0 && vel(j + 1) >= 0.0;
        let (mut seg, mut ok) = (0, 0);
        for k in 0..pos.len() as isize - 1 {
            if reversal_at(k - 1) || reversal_at(k) || reversal_at(k + 1) {
                continue;
            }
            seg += 1;
            let second = h(k + 1) - 2.0 * h(k) + h(k - 1);
            if (second > 0.0 && g > 0.0) || (second < 0.0 && g < 0.0) {
                ok += 1;
            }
        }
        if seg == 0 { 1.0 } else { ok as f64 / seg as f64 }
    }

    #[test]
    fn noise_direction_matches_oracle() {
        let w = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let pos: Vec<f64> = (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let s = physics_score(&traj(pos.clone()), &falling(), &w);
            let want = oracle_direction(&pos, -1.0, &w);
            assert!((s.direction_consistency - want).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_scores_badly() {
        let w = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reports: Vec<ScoreReport> = (0..500)
            .map(|_| {
                let pos = (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                physics_score(&traj(pos), &falling(), &w)
            })
            .collect();
        let m = ScoreReport::mean(&reports);
        assert!(m.penetration_rate > 0.3);
        assert!(m.energy_violation_rate > 0.2);
        assert!(m.composite() > 0.2);
    }

    #[test]
    fn composite_of_perfect_is_zero() {
        let r = ScoreReport {
            penetration_rate: 0.0,
            energy_violation_rate: 0.0,
            direction_consistency: 1.0,
        };
        assert_eq!(r.composite(), 0.0);
    }
}
