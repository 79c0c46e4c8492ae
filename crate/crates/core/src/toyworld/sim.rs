use super::{PhysicsParams, Profile, SceneCode, TrajectorySample, WorldConfig};
use crate::error::{Error, Result};

/// Symplectic-Euler ball from `start_height`, recording the height after each
/// of `T` steps.
///
/// Per step: `v <- (1 - drag) v + gravity dt (+ drive)`, `p <- p + v dt`.
/// Crossing the floor reflects both position and velocity scaled by the
/// restitution; with zero restitution the ball sticks at 0 for good.
pub fn simulate(
    params: &PhysicsParams,
    scene: &SceneCode,
    world: &WorldConfig,
) -> Result<TrajectorySample> {
    params.validate()?;
    if world.steps < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 steps, got {}",
            world.steps
        )));
    }
    if !(world.dt.is_finite() && world.dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "dt must be positive, got {}",
            world.dt
        )));
    }
    if scene.0.len() != world.scene_dim {
        return Err(Error::DimensionMismatch {
            expected: world.scene_dim,
            got: scene.0.len(),
        });
    }

    let dt = world.dt;
    let damp = 1.0 - params.drag;
    let ramp = world.ramp_steps();
    let (mut v, drive) = match params.profile {
        Profile::Sudden => (params.speed, 0.0),
        Profile::Gradual => (0.0, params.speed / ramp as f64),
    };
    let mut p = world.start_height;
    let mut stuck = false;
    let mut positions = Vec::with_capacity(world.steps);

    for k in 0..world.steps {
        if stuck {
            positions.push(0.0);
            continue;
        }
        v = damp * v + params.gravity * dt;
        if k < ramp {
            v += drive;
        }
        p += v * dt;
        if p < 0.0 {
            if params.restitution == 0.0 {
                p = 0.0;
                v = 0.0;
                stuck = true;
            } else {
                p = -params.restitution * p;
                v = -params.restitution * v;
            }
        }
        positions.push(p);
    }

    Ok(TrajectorySample {
        appearance: scene.0.clone(),
        positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::physics_score;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene() -> SceneCode {
        SceneCode::from_raw(vec![1.0; 8]).unwrap()
    }

    fn params(gravity: f64, restitution: f64, drag: f64, speed: f64) -> PhysicsParams {
        PhysicsParams {
            gravity,
            restitution,
            drag,
            speed,
            profile: Profile::Sudden,
        }
    }

    #[test]
    fn no_forces_stays_put() {
        let t = simulate(&params(0.0, 0.5, 0.0, 0.0), &scene(), &WorldConfig::default()).unwrap();
        assert!(t.positions.iter().all(|&p| p == 1.0));
        assert_eq!(t.appearance, scene().0);
    }

    #[test]
    fn hand_stepped_free_fall() {
        let world = WorldConfig {
            steps: 5,
            dt: 0.1,
            ..WorldConfig::default()
        };
        let t = simulate(&params(-1.0, 0.5, 0.0, 0.0), &scene(), &world).unwrap();
        // v: -0.1, -0.2, ...; p: 1 - 0.01, -0.02, -0.03, -0.04, -0.05 cumulatively
        let want = [0.99, 0.97, 0.94, 0.90, 0.85];
        for (got, want) in t.positions.iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_restitution_sticks() {
        let world = WorldConfig {
            steps: 40,
            ..WorldConfig::default()
        };
        let t = simulate(&params(-1.0, 0.0, 0.0, 0.3), &scene(), &world).unwrap();
        let first = t.positions.iter().position(|&p| p == 0.0).expect("hits floor");
        assert!(t.positions[first..].iter().all(|&p| p == 0.0));
        // sticking survives a later upward pull too
        let up = simulate(&params(-3.0, 0.0, 0.0, 0.0), &scene(), &world).unwrap();
        assert_eq!(*up.positions.last().unwrap(), 0.0);
    }

    #[test]
    fn gradual_profile_ramps() {
        let world = WorldConfig::default();
        let mut p = params(0.0, 1.0, 0.0, 1.6);
        let sudden = simulate(&p, &scene(), &world).unwrap();
        p.profile = Profile::Gradual;
        let gradual = simulate(&p, &scene(), &world).unwrap();
        assert!(gradual.positions[0] < sudden.positions[0]);
        // after the ramp both move at the same speed
        let r = world.ramp_steps();
        let dv_s = sudden.positions[r + 1] - sudden.positions[r];
        let dv_g = gradual.positions[r + 1] - gradual.positions[r];
        assert!((dv_s - dv_g).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_inputs() {
        let w = WorldConfig::default();
        assert!(simulate(&params(f64::NAN, 0.5, 0.0, 1.0), &scene(), &w).is_err());
        assert!(simulate(&params(-1.0, 1.5, 0.0, 1.0), &scene(), &w).is_err());
        assert!(simulate(&params(-1.0, 0.5, 1.0, 1.0), &scene(), &w).is_err());
        let short = WorldConfig { steps: 1, ..w.clone() };
        assert!(simulate(&params(-1.0, 0.5, 0.0, 1.0), &scene(), &short).is_err());
        let bad_dt = WorldConfig { dt: 0.0, ..w };
        assert!(simulate(&params(-1.0, 0.5, 0.0, 1.0), &scene(), &bad_dt).is_err());
    }

    #[test]
    fn mirror_symmetry_without_contact() {
        let world = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let g = rng.random_range(0.0..0.7);
            let d = rng.random_range(0.0..0.3);
            let down = simulate(&params(-g, 0.5, d, 0.0), &scene(), &world).unwrap();
            let up = simulate(&params(g, 0.5, d, 0.0), &scene(), &world).unwrap();
            assert!(down.positions.iter().all(|&p| p > 0.0), "must not touch the floor");
            for (a, b) in down.positions.iter().zip(&up.positions) {
                assert!(((a - 1.0) + (b - 1.0)).abs() < 1e-12);
            }
        }
    }

    /// Energy of the recorded state, `v^2/2 - g p`, with the velocity taken
    /// from consecutive heights.
    fn energies(t: &TrajectorySample, p: &PhysicsParams, w: &WorldConfig) -> Vec<f64> {
        let mut prev = w.start_height;
        t.positions
            .iter()
            .map(|&x| {
                let v = (x - prev) / w.dt;
                prev = x;
                0.5 * v * v - p.gravity * x
            })
            .collect()
    }

    #[test]
    fn free_flight_energy_never_increases() {
        let world = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let p = PhysicsParams {
                gravity: rng.random_range(-2.0..2.0),
                restitution: rng.random_range(0.0..=1.0),
                drag: rng.random_range(0.0..0.1),
                speed: rng.random_range(0.0..2.0),
                profile: Profile::Sudden,
            };
            // start high enough that the ball never reaches the floor
            let w = WorldConfig { start_height: 100.0, ..world.clone() };
            let t = simulate(&p, &scene(), &w).unwrap();
            let e = energies(&t, &p, &w);
            for k in 0..e.len() - 1 {
                assert!(e[k + 1] - e[k] <= 1e-9, "{p:?} step {k}");
            }
        }
    }

    #[test]
    fn simulator_output_scores_clean() {
        let world = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..20_000 {
            let p = PhysicsParams {
                gravity: rng.random_range(-3.0..3.0),
                restitution: if i % 10 == 0 { 0.0 } else { rng.random_range(0.0..=1.0) },
                drag: rng.random_range(0.0..0.2),
                speed: rng.random_range(0.0..2.5),
                profile: if rng.random::<bool>() { Profile::Sudden } else { Profile::Gradual },
            };
            let t = simulate(&p, &scene(), &world).unwrap();
            assert!(t.positions.iter().all(|&x| x >= -1e-9));
            let s = physics_score(&t, &p, &world);
            assert_eq!(s.penetration_rate, 0.0, "{p:?}");
            assert_eq!(s.energy_violation_rate, 0.0, "{p:?} {:?}", t.positions);
        }
    }
}
