use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Condition;
use crate::error::{Error, Result};
use crate::toyworld::{AxisRanges, Profile};
use crate::vecops;

/// Number of physics features appended to the scene code.
pub const PHYSICS_FEATURES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionEmbedding {
    pub z: Vec<f64>,
    pub source_id: Option<usize>,
}

/// Shape and gains of the frozen random encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub dim: usize,
    pub tokens: usize,
    pub seed: u64,
    /// Weight scale on the scene columns.
    pub scene_gain: f64,
    /// Weight scale on the normalized physics columns.
    pub physics_gain: f64,
    /// Bias scale; a shared offset across conditions.
    pub bias_gain: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            tokens: 4,
            seed: 0,
            scene_gain: 2.0,
            physics_gain: 0.35,
            bias_gain: 1.0,
        }
    }
}

/// `z = mean_l tanh(W_l [scene | normalized params] + b_l)`.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    scene_dim: usize,
    dim: usize,
    ranges: AxisRanges,
    /// One `dim x in_dim` row-major matrix per token.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl ConditionEncoder {
    pub fn new(scene_dim: usize, ranges: AxisRanges) -> Result<Self> {
        Self::with_spec(scene_dim, ranges, &EncoderSpec::default())
    }

    pub fn with_spec(scene_dim: usize, ranges: AxisRanges, spec: &EncoderSpec) -> Result<Self> {
        ranges.validate()?;
        if spec.dim == 0 || spec.tokens == 0 {
            return Err(Error::InvalidParameter("encoder needs dim, tokens >= 1".into()));
        }
        let in_dim = scene_dim + PHYSICS_FEATURES;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut weights = Vec::with_capacity(spec.tokens);
        let mut biases = Vec::with_capacity(spec.tokens);
        for _ in 0..spec.tokens {
            let mut w = Vec::with_capacity(spec.dim * in_dim);
            for _ in 0..spec.dim {
                for c in 0..in_dim {
                    let gain = if c < scene_dim {
                        spec.scene_gain
                    } else {
                        spec.physics_gain
                    };
                    w.push(gain * rng.sample::<f64, _>(StandardNormal));
                }
            }
            weights.push(w);
            biases.push(
                (0..spec.dim)
                    .map(|_| spec.bias_gain * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
        }
        Ok(Self {
            scene_dim,
            dim: spec.dim,
            ranges,
            weights,
            biases,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self, cond: &Condition) -> Result<Vec<f64>> {
        Error::check_dim(self.scene_dim, cond.scene.0.len())?;
        let unit = |x: f64, [lo, hi]: [f64; 2]| 2.0 * (x - lo) / (hi - lo) - 1.0;
        let p = &cond.params;
        let r = &self.ranges;
        let mut f = cond.scene.0.clone();
        f.extend_from_slice(&[
            unit(p.gravity, r.gravity),
            unit(p.restitution, r.restitution),
            unit(p.drag, r.drag),
            unit(p.speed, r.speed),
            match p.profile {
                Profile::Sudden => -1.0,
                Profile::Gradual => 1.0,
            },
        ]);
        Ok(f)
    }

    pub fn encode(&self, cond: &Condition, source_id: Option<usize>) -> Result<ConditionEmbedding> {
        let f = self.features(cond)?;
        let in_dim = f.len();
        let mut z = vec![0.0; self.dim];
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for (i, (row, bi)) in w.chunks_exact(in_dim).zip(b).enumerate() {
                z[i] += (vecops::dot(row, &f) + bi).tanh();
            }
        }
        let inv = 1.0 / self.weights.len() as f64;
        z.iter_mut().for_each(|v| *v *= inv);
        Ok(ConditionEmbedding { z, source_id })
    }

    pub fn encode_all(&self, conds: &[Condition]) -> Result<Vec<ConditionEmbedding>> {
        conds
            .iter()
            .enumerate()
            .map(|(i, c)| self.encode(c, Some(i)))
            .collect()
    }
}

/// Row-major `n x n` cosine matrix computed from row-normalized embeddings.
pub fn pairwise_cosine(embs: &[ConditionEmbedding]) -> Vec<f64> {
    let unit: Vec<Vec<f64>> = embs
        .iter()
        .map(|e| {
            let n = vecops::norm(&e.z);
            if n == 0.0 {
                vec![0.0; e.z.len()]
            } else {
                vecops::scale(&e.z, 1.0 / n)
            }
        })
        .collect();
    let n = unit.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = if vecops::norm_sq(&unit[i]) > 0.0 { 1.0 } else { 0.0 };
        for j in i + 1..n {
            let c = vecops::dot(&unit[i], &unit[j]);
            out[i * n + j] = c;
            out[j * n + i] = c;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{make_dataset, DatasetConfig, PhysicsParams, SceneCode, WorldConfig};

    fn cond(gravity: f64) -> Condition {
        Condition::new(
            SceneCode::from_raw(vec![1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 0.0, 1.0]).unwrap(),
            PhysicsParams {
                gravity,
                restitution: 0.7,
                drag: 0.01,
                speed: 0.5,
                profile: Profile::Sudden,
            },
        )
    }

    #[test]
    fn frozen_and_deterministic() {
        let a = ConditionEncoder::new(8, AxisRanges::default()).unwrap();
        let b = ConditionEncoder::new(8, AxisRanges::default()).unwrap();
        let za = a.encode(&cond(-1.0), None).unwrap();
        assert_eq!(za, a.encode(&cond(-1.0), None).unwrap());
        assert_eq!(za, b.encode(&cond(-1.0), None).unwrap());
        assert_eq!(za.z.len(), 16);
        assert!(vecops::all_finite(&za.z));
    }

    #[test]
    fn gravity_sign_changes_embedding() {
        let e = ConditionEncoder::new(8, AxisRanges::default()).unwrap();
        let a = e.encode(&cond(-1.0), None).unwrap();
        let b = e.encode(&cond(1.0), None).unwrap();
        assert_ne!(a.z, b.z);
        assert!(vecops::cosine(&a.z, &b.z) < 1.0);
    }

    #[test]
    fn pairwise_matches_double_loop() {
        let world = WorldConfig::default();
        let recs = make_dataset(512, 3, &DatasetConfig::default(), &world).unwrap();
        let e = ConditionEncoder::new(8, AxisRanges::default()).unwrap();
        let conds: Vec<Condition> = recs.iter().map(Condition::of).collect();
        let embs = e.encode_all(&conds).unwrap();
        let m = pairwise_cosine(&embs);
        let n = embs.len();
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (&embs[i].z, &embs[j].z);
                let mut d = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for k in 0..a.len() {
                    d += a[k] * b[k];
                    na += a[k] * a[k];
                    nb += b[k] * b[k];
                }
                let want = d / (na.sqrt() * nb.sqrt());
                assert!((m[i * n + j] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn wrong_scene_dim_errors() {
        let e = ConditionEncoder::new(4, AxisRanges::default()).unwrap();
        assert!(e.encode(&cond(1.0), None).is_err());
    }
}
