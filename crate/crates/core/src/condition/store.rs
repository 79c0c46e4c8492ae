use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Condition, PerturbationAxis};
use crate::error::{Error, Result};
use crate::model::VelocityField;
use crate::sampler::{euler_sample_flat, SamplerConfig};
use crate::toyworld::dataset::{read_jsonl, write_jsonl};
use crate::toyworld::{simulate, PhysicsParams, WorldConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSource {
    /// Sampled from the frozen stage-1 model.
    #[default]
    Model,
    /// Ground-truth dynamics of the perturbed parameters.
    Simulator,
}

impl NegativeSource {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "model" => Ok(Self::Model),
            "simulator" => Ok(Self::Simulator),
            other => Err(Error::InvalidParameter(format!(
                "unknown negatives source {other:?} (model|simulator)"
            ))),
        }
    }
}

/// One line of the negatives file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativeRecord {
    pub anchor_id: usize,
    pub axis: PerturbationAxis,
    pub perturbed_params: PhysicsParams,
    pub cosine: f64,
    pub traj: Vec<f64>,
    pub seed: u64,
}

pub fn write_negatives(path: &Path, records: &[NegativeRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_negatives(path: &Path) -> Result<Vec<NegativeRecord>> {
    read_jsonl(path)
}

/// Immutable per-anchor index over mined hard negatives.
#[derive(Clone, Debug, Default)]
pub struct NegativesStore {
    records: Vec<NegativeRecord>,
    by_anchor: BTreeMap<usize, Vec<usize>>,
}

impl NegativesStore {
    pub fn new(records: Vec<NegativeRecord>) -> Self {
        let mut by_anchor: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_anchor.entry(r.anchor_id).or_default().push(i);
        }
        Self { records, by_anchor }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[NegativeRecord] {
        &self.records
    }

    pub fn anchors_covered(&self) -> usize {
        self.by_anchor.len()
    }

    pub fn for_anchor(&self, anchor: usize) -> &[usize] {
        self.by_anchor.get(&anchor).map_or(&[], |v| v.as_slice())
    }

    /// One of the anchor's retained negatives, uniformly; `None` when the
    /// anchor had no accepted candidate.
    pub fn choose<R: Rng + ?Sized>(&self, anchor: usize, rng: &mut R) -> Option<&NegativeRecord> {
        let idx = self.for_anchor(anchor);
        if idx.is_empty() {
            None
        } else {
            Some(&self.records[idx[rng.random_range(0..idx.len())]])
        }
    }
}

/// Produces the trajectory of a perturbed condition, memoized on
/// `(condition hash, seed)`.
pub struct NegativeRenderer<'a> {
    source: NegativeSource,
    model: Option<&'a VelocityField>,
    sampler: SamplerConfig,
    world: WorldConfig,
    cache: HashMap<(String, u64), Vec<f64>>,
    hits: usize,
}

impl<'a> NegativeRenderer<'a> {
    pub fn from_model(model: &'a VelocityField, sampler: SamplerConfig, world: WorldConfig) -> Self {
        Self {
            source: NegativeSource::Model,
            model: Some(model),
            sampler,
            world,
            cache: HashMap::new(),
            hits: 0,
        }
    }

    pub fn simulator(world: WorldConfig) -> Self {
        Self {
            source: NegativeSource::Simulator,
            model: None,
            sampler: SamplerConfig::default(),
            world,
            cache: HashMap::new(),
            hits: 0,
        }
    }

    pub fn source(&self) -> NegativeSource {
        self.source
    }

    pub fn cache_hits(&self) -> usize {
        self.hits
    }

    pub fn render(&mut self, cond: &Condition, z: &[f64], seed: u64) -> Result<Vec<f64>> {
        let key = (cond.hash(), seed);
        if let Some(t) = self.cache.get(&key) {
            self.hits += 1;
            return Ok(t.clone());
        }
        let traj = match (self.source, self.model) {
            (NegativeSource::Simulator, _) => simulate(&cond.params, &cond.scene, &self.world)?.to_flat(),
            (NegativeSource::Model, Some(m)) => euler_sample_flat(m, z, &self.sampler, seed)?,
            (NegativeSource::Model, None) => {
                return Err(Error::Precondition("model-rendered negatives need a stage-1 checkpoint".into()))
            }
        };
        self.cache.insert(key, traj.clone());
        Ok(traj)
    }
}
