//! Run configuration: a nested structure addressed through flat dotted keys.
//!
//! Resolution order is built-in defaults, then the config file, then
//! command-line flags and `--set key=value`. Training defaults depend on the
//! stage, so the stage is resolved first.

use std::collections::BTreeMap;
use std::path::Path;

use direct_flow_core::condition::{EncoderSpec, MiningConfig};
use direct_flow_core::objectives::Lambdas;
use direct_flow_core::sampler::SamplerConfig;
use direct_flow_core::toyworld::{AxisRanges, DatasetConfig, WorldConfig};
use direct_flow_core::trainer::{EvalConfig, Stage, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub type FlatConfig = BTreeMap<String, Value>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub seed: u64,
    pub n_scenes: usize,
    pub scene_pool_seed: u64,
    pub coupling: f64,
    pub ranges: AxisRanges,
}

impl Default for DataConfig {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            n: 512,
            seed: 0,
            n_scenes: d.n_scenes,
            scene_pool_seed: d.scene_pool_seed,
            coupling: d.coupling,
            ranges: d.ranges,
        }
    }
}

impl DataConfig {
    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            n_scenes: self.n_scenes,
            scene_pool_seed: self.scene_pool_seed,
            coupling: self.coupling,
            ranges: self.ranges.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub restarts: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub fm_draws: usize,
    pub probes: usize,
    pub seed: u64,
    /// Held-out flow-matching loss a converged stage-1 model must reach.
    pub pretrain_fm_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    /// Condition `i` of a `sample` run uses initial-noise seed `seed + i`.
    pub seed: u64,
}

/// Everything a command may read. Training fields live under `train.*`
/// except the loss weights (`lambdas.*`) and the cluster count (`cluster.k`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub encoder: EncoderSpec,
    pub cluster: ClusterConfig,
    pub negatives: MiningConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
    pub diagnose: DiagnoseConfig,
    pub sample: SampleConfig,
}

impl RunConfig {
    pub fn defaults(stage: Stage) -> Self {
        let train = TrainConfig::for_stage(stage);
        Self {
            world: WorldConfig::default(),
            data: DataConfig::default(),
            encoder: EncoderSpec::default(),
            cluster: ClusterConfig {
                k: train.k,
                restarts: 50,
                seed: 0,
            },
            negatives: MiningConfig::default(),
            train,
            sampler: SamplerConfig::default(),
            eval: EvalSection {
                fm_draws: 4,
                probes: 256,
                seed: 0,
                pretrain_fm_bound: 6.0,
            },
            diagnose: DiagnoseConfig { steps: 50 },
            sample: SampleConfig { seed: 0 },
        }
    }

    pub fn lambdas(&self) -> Lambdas {
        self.train.lambdas
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            sampler: self.sampler.clone(),
            fm_draws: self.eval.fm_draws,
            probes: self.eval.probes,
            seed: self.eval.seed,
        }
    }

    /// Flat dotted-key view; this is what manifests echo.
    pub fn flatten(&self) -> FlatConfig {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut flat = FlatConfig::new();
        flatten_into("", &value, &mut flat);
        let moved: Vec<String> = flat.keys().filter(|k| k.starts_with("train.lambdas.")).cloned().collect();
        for key in moved {
            let v = flat.remove(&key).expect("listed");
            flat.insert(key["train.".len()..].to_string(), v);
        }
        flat.remove("train.K");
        flat
    }

    fn unflatten(flat: &FlatConfig) -> Result<Self, CliError> {
        let mut root = Map::new();
        for (key, v) in flat {
            let path = if key.starts_with("lambdas.") {
                format!("train.{key}")
            } else {
                key.clone()
            };
            insert_path(&mut root, &path, v.clone());
        }
        let k = flat.get("cluster.k").cloned().unwrap_or(Value::Null);
        if let Some(Value::Object(train)) = root.get_mut("train") {
            train.insert("K".into(), k);
        }
        serde_json::from_value(Value::Object(root)).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut FlatConfig) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn insert_path(root: &mut Map<String, Value>, path: &str, value: Value) {
    match path.split_once('.') {
        None => {
            root.insert(path.to_string(), value);
        }
        Some((head, rest)) => {
            let child = root
                .entry(head.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(m) = child {
                insert_path(m, rest, value);
            }
        }
    }
}

/// Parses a `--set` value: JSON when it parses, a bare string otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn parse_assignment(raw: &str) -> Result<(String, Value), CliError> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {raw:?}")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

/// Reads a flat JSON object of dotted keys.
pub fn read_config_file(path: &Path) -> Result<FlatConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {} is not JSON: {e}", path.display())))?;
    match value {
        Value::Object(map) => Ok(map.into_iter().collect()),
        _ => Err(CliError::Usage(format!(
            "config {} must be a flat JSON object of dotted keys",
            path.display()
        ))),
    }
}

/// Layers `overrides` (in order) over the defaults for the resolved stage.
pub fn resolve(default_stage: Stage, overrides: &[(String, Value)]) -> Result<(RunConfig, FlatConfig), CliError> {
    let stage = match overrides.iter().rev().find(|(k, _)| k == "train.stage") {
        Some((_, Value::String(s))) => Stage::from_name(s).map_err(|e| CliError::Usage(e.to_string()))?,
        Some((_, v)) => return Err(CliError::Usage(format!("train.stage must be a string, got {v}"))),
        None => default_stage,
    };
    let mut flat = RunConfig::defaults(stage).flatten();
    for (k, v) in overrides {
        match flat.get_mut(k) {
            Some(slot) => *slot = v.clone(),
            None => return Err(CliError::Usage(format!("unknown config key {k:?}"))),
        }
    }
    let cfg = RunConfig::unflatten(&flat)?;
    // normalise the echo through the typed config
    Ok((cfg.clone(), cfg.flatten()))
}
