//! Condition space: the frozen encoder, semantic partitioning, and the two
//! negative samplers (partition-exclusive random and single-axis hard).

mod encoder;
mod kmeans;
mod macro_neg;
mod micro;
mod store;

pub use encoder::{pairwise_cosine, ConditionEmbedding, ConditionEncoder, EncoderSpec};
pub use kmeans::{kmeans_partition, Partition, MAX_LLOYD_ITERS};
pub use macro_neg::{sample_in_batch, sample_macro_negative, MANS_POOL_ERROR};
pub use micro::{
    changed_fields, filter_candidates, generate_candidates, mine_anchor, perturb_condition,
    Candidate, MiningConfig, ParamField, PerturbationAxis,
};
pub use store::{
    read_negatives, write_negatives, NegativeRecord, NegativeRenderer, NegativeSource,
    NegativesStore,
};

use serde::{Deserialize, Serialize};

use crate::hashing::hash_f64s;
use crate::toyworld::{DatasetRecord, PhysicsParams, Profile, SceneCode};

/// A (scene, physics) pair: the toy analog of a text prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub scene: SceneCode,
    pub params: PhysicsParams,
}

impl Condition {
    pub fn new(scene: SceneCode, params: PhysicsParams) -> Self {
        Self { scene, params }
    }

    pub fn of(record: &DatasetRecord) -> Self {
        Self::new(record.scene.clone(), record.params)
    }

    pub fn hash(&self) -> String {
        let p = &self.params;
        let mut v = self.scene.0.clone();
        v.extend_from_slice(&[
            p.gravity,
            p.restitution,
            p.drag,
            p.speed,
            match p.profile {
                Profile::Sudden => 0.0,
                Profile::Gradual => 1.0,
            },
        ]);
        hash_f64s(&v)
    }
}
