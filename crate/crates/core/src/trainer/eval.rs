use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ReferenceModel;
use crate::error::{Error, Result};
use crate::model::VelocityField;
use crate::sampler::{euler_sample, SamplerConfig};
use crate::schedule::{interpolate, target_velocity, Schedule};
use crate::toyworld::{physics_score, DatasetRecord, ScoreReport, WorldConfig};
use crate::vecops;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    /// `(t, eps)` draws per held-out record for the flow-matching loss.
    pub fm_draws: usize,
    /// Size of the fixed drift probe set.
    pub probes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            fm_draws: 4,
            probes: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fm_loss: f64,
    pub physics: ScoreReport,
    pub composite: f64,
    /// Mean `||v - v_ref||` over the probe set; absent without a reference.
    pub drift: Option<f64>,
    pub n: usize,
}

/// A held-out split: records and their (frozen) condition embeddings.
pub struct EvalSet<'a> {
    pub records: &'a [DatasetRecord],
    pub embeddings: &'a [Vec<f64>],
}

/// Physics of one sample per held-out condition, flow-matching loss on
/// fixed draws, and drift against the reference on a fixed probe set.
pub fn evaluate(
    model: &VelocityField,
    set: &EvalSet<'_>,
    reference: Option<&ReferenceModel>,
    world: &WorldConfig,
    schedule: Schedule,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let n = set.records.len();
    if n == 0 || set.embeddings.len() != n {
        return Err(Error::Precondition(
            "evaluation needs a non-empty held-out set with one embedding per record".into(),
        ));
    }
    let dim = world.data_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fm = 0.0;
    for (rec, z) in set.records.iter().zip(set.embeddings) {
        for _ in 0..cfg.fm_draws {
            let t: f64 = rng.random();
            let eps: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let x_t = interpolate(&rec.traj, &eps, t, schedule)?;
            let u = target_velocity(&rec.traj, &eps, t, schedule)?;
            fm += vecops::dist_sq(&model.forward(&x_t, t, z)?, &u);
        }
    }
    let fm_loss = fm / (n * cfg.fm_draws.max(1)) as f64;

    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(1);
    let mut reports = Vec::with_capacity(n);
    for (rec, z) in set.records.iter().zip(set.embeddings) {
        let s = euler_sample(model, z, &cfg.sampler, sample_rng.random(), world.scene_dim)?;
        reports.push(physics_score(&s, &rec.params, world));
    }
    let physics = ScoreReport::mean(&reports);

    let drift = match reference {
        None => None,
        Some(r) => {
            let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed);
            prng.set_stream(2);
            let mut acc = 0.0;
            for k in 0..cfg.probes {
                let i = k % n;
                let t: f64 = prng.random();
                let eps: Vec<f64> = (0..dim).map(|_| prng.sample(StandardNormal)).collect();
                let x_t = interpolate(&set.records[i].traj, &eps, t, schedule)?;
                let z = &set.embeddings[i];
                acc += vecops::norm(&vecops::sub(
                    &model.forward(&x_t, t, z)?,
                    &r.model().forward(&x_t, t, z)?,
                ));
            }
            Some(acc / cfg.probes.max(1) as f64)
        }
    };
    Ok(EvalReport {
        fm_loss,
        composite: physics.composite(),
        physics,
        drift,
        n,
    })
}

/// Scores i.i.d. standard-normal position blocks against each held-out
/// condition: the no-skill reference for physics rates.
pub fn noise_baseline(records: &[DatasetRecord], world: &WorldConfig, seed: u64) -> Result<ScoreReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(records.len());
    for rec in records {
        let flat: Vec<f64> = (0..world.data_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let s = crate::toyworld::TrajectorySample::from_flat(&flat, world.scene_dim)?;
        reports.push(physics_score(&s, &rec.params, world));
    }
    Ok(ScoreReport::mean(&reports))
}
