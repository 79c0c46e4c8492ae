//! One post-training run per setting of a parameter, one CSV row each.
//!
//! `--param k` re-clusters at every K. `--param lambdas` tunes the loss
//! weights greedily: the anchor weight first with both contrastive terms
//! off, then the random weight, then the hard weight, each time keeping the
//! best held-out composite found so far.

use direct_flow_core::condition::kmeans_partition;
use direct_flow_core::trainer::{train, MetricsRecord, RandomNegatives};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::commands::{load_training, LoadedTraining};
use crate::config::{parse_value, resolve, RunConfig};
use crate::manifest::OutputDir;
use crate::{CliError, Context};

pub const ANC_GRID: [f64; 5] = [0.0, 0.05, 0.1, 0.2, 0.5];
pub const RAND_GRID: [f64; 5] = [0.0, 0.001, 0.005, 0.01, 0.05];
pub const HARD_GRID: [f64; 5] = [0.0, 0.005, 0.02, 0.05, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda_rand: f64,
    pub lambda_hard: f64,
    pub lambda_anc: f64,
    pub fm_loss: f64,
    pub penetration_rate: f64,
    pub energy_violation_rate: f64,
    pub direction_consistency: f64,
    pub composite: f64,
    pub drift: Option<f64>,
    pub mean_cosine_param: Option<f64>,
    pub selected: bool,
}

fn with_override(base: &RunConfig, key: &str, value: Value) -> Result<RunConfig, CliError> {
    let mut overrides: Vec<(String, Value)> = base.flatten().into_iter().collect();
    overrides.push((key.to_string(), value));
    Ok(resolve(base.train.stage, &overrides)?.0)
}

fn run_one(cfg: &RunConfig, data: &LoadedTraining, param: &str, value: &str) -> Result<SweepRow, CliError> {
    let needs_partition = cfg.lambdas().rand > 0.0 && cfg.train.random_negatives == RandomNegatives::Mans;
    let partition = if needs_partition {
        Some(kmeans_partition(
            &data.embeddings,
            cfg.cluster.k,
            cfg.cluster.restarts,
            cfg.cluster.seed,
        )?)
    } else {
        None
    };
    let mut inputs = data.inputs(cfg);
    inputs.partition = partition.as_ref();
    let mut metrics: Vec<MetricsRecord> = Vec::new();
    let outcome = train(&cfg.train, &inputs, &mut metrics)?;
    let eval = outcome
        .final_eval
        .ok_or_else(|| CliError::Precondition("sweep needs a held-out set (--heldout)".into()))?;
    let cosines: Vec<f64> = metrics.iter().filter_map(|m| m.alignment.map(|a| a.cosine_param)).collect();
    let l = cfg.lambdas();
    Ok(SweepRow {
        param: param.to_string(),
        value: value.to_string(),
        k: cfg.cluster.k,
        lambda_rand: l.rand,
        lambda_hard: l.hard,
        lambda_anc: l.anc,
        fm_loss: eval.fm_loss,
        penetration_rate: eval.physics.penetration_rate,
        energy_violation_rate: eval.physics.energy_violation_rate,
        direction_consistency: eval.physics.direction_consistency,
        composite: eval.composite,
        drift: eval.drift,
        mean_cosine_param: (!cosines.is_empty()).then(|| cosines.iter().sum::<f64>() / cosines.len() as f64),
        selected: false,
    })
}

/// Index of the lowest composite; ties go to the earlier setting.
fn best(rows: &[SweepRow]) -> usize {
    let mut b = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.composite < rows[b].composite {
            b = i;
        }
    }
    b
}

fn sweep_key(
    base: &RunConfig,
    data: &LoadedTraining,
    key: &str,
    values: &[String],
) -> Result<Vec<SweepRow>, CliError> {
    let configs = values
        .iter()
        .map(|v| with_override(base, key, parse_value(v)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = configs
        .par_iter()
        .zip(values)
        .map(|(cfg, v)| run_one(cfg, data, key, v))
        .collect::<Result<Vec<_>, _>>()?;
    let b = best(&rows);
    rows[b].selected = true;
    Ok(rows)
}

fn greedy_lambdas(base: &RunConfig, data: &LoadedTraining) -> Result<Vec<SweepRow>, CliError> {
    let mut current = with_override(base, "lambdas.rand", Value::from(0.0))?;
    current = with_override(&current, "lambdas.hard", Value::from(0.0))?;
    let mut all = Vec::new();
    for (key, grid) in [
        ("lambdas.anc", &ANC_GRID),
        ("lambdas.rand", &RAND_GRID),
        ("lambdas.hard", &HARD_GRID),
    ] {
        let values: Vec<String> = grid.iter().map(|v| format!("{v}")).collect();
        let rows = sweep_key(&current, data, key, &values)?;
        let chosen = rows.iter().position(|r| r.selected).expect("one row is selected");
        current = with_override(&current, key, parse_value(&values[chosen]))?;
        all.extend(rows);
    }
    Ok(all)
}

pub(crate) fn run(ctx: &Context<'_>, out: &mut OutputDir) -> Result<(), CliError> {
    let param = ctx
        .args
        .get("param")
        .and_then(Value::as_str)
        .ok_or_else(|| CliError::Usage("sweep needs --param".into()))?;
    let values: Option<Vec<String>> = ctx
        .args
        .get("values")
        .and_then(Value::as_str)
        .map(|s| s.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect());
    let data = load_training(ctx)?;
    if data.heldout.is_none() {
        return Err(CliError::Precondition("sweep needs a held-out set (--heldout)".into()));
    }
    let rows = match (param, values) {
        ("lambdas", None) => greedy_lambdas(ctx.cfg, &data)?,
        ("lambdas", Some(_)) => {
            return Err(CliError::Usage(
                "--param lambdas uses fixed grids; sweep lambdas.anc, lambdas.rand or lambdas.hard for custom values"
                    .into(),
            ))
        }
        (_, None) => return Err(CliError::Usage(format!("--param {param} needs --values"))),
        (p, Some(v)) => {
            let key = if p == "k" || p == "K" { "cluster.k" } else { p };
            if v.is_empty() {
                return Err(CliError::Usage("--values is empty".into()));
            }
            sweep_key(ctx.cfg, &data, key, &v)?
        }
    };
    let mut w = csv::Writer::from_writer(out.create_file("sweep.csv")?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    out.manifest_mut().summary.insert("rows".into(), Value::from(rows.len()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(c: f64) -> SweepRow {
        SweepRow {
            param: "p".into(),
            value: "v".into(),
            k: 2,
            lambda_rand: 0.0,
            lambda_hard: 0.0,
            lambda_anc: 0.0,
            fm_loss: 0.0,
            penetration_rate: 0.0,
            energy_violation_rate: 0.0,
            direction_consistency: 0.0,
            composite: c,
            drift: None,
            mean_cosine_param: None,
            selected: false,
        }
    }

    #[test]
    fn best_prefers_earliest_minimum() {
        assert_eq!(best(&[row(0.3), row(0.1), row(0.1), row(0.2)]), 1);
    }

    #[test]
    fn override_keeps_stage_and_other_keys() {
        let base = resolve(
            direct_flow_core::trainer::Stage::Direct,
            &[("train.steps".into(), Value::from(7))],
        )
        .unwrap()
        .0;
        let c = with_override(&base, "cluster.k", Value::from(4)).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.k, 4);
        assert_eq!(c.train.stage, base.train.stage);
        assert!(with_override(&base, "nope", Value::from(1)).is_err());
    }
}
