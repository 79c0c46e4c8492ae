//! Aggregates finished training runs into per-arm summary tables.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use direct_flow_core::trainer::{MetricsRecord, Stage};
use serde::Serialize;
use serde_json::Value;

use crate::commands::EvalFile;
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{CliError, Context};
use crate::manifest::OutputDir;

/// Arms in table order, keyed by training stage.
pub const ARMS: [(Stage, &str); 4] = [
    (Stage::Pretrain, "Zero-shot"),
    (Stage::Sft, "+ SFT"),
    (Stage::DeltaFm, "+ Random negatives (ΔFM)"),
    (Stage::Direct, "+ SFT + MaNS + MiNS (DiReCT)"),
];

pub fn arm_name(stage: Stage) -> &'static str {
    ARMS.iter().find(|(s, _)| *s == stage).map(|(_, n)| *n).expect("every stage has an arm")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmRow {
    pub arm: String,
    pub runs: usize,
    pub mean_cosine_param: Option<f64>,
    pub penetration_rate: Option<f64>,
    pub energy_violation_rate: Option<f64>,
    pub direction_consistency: Option<f64>,
    pub composite: Option<f64>,
    pub fm_loss: Option<f64>,
    pub drift: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftRow {
    pub arm: String,
    pub run: String,
    pub step: usize,
    pub drift: f64,
}

/// What the report needs from one run directory.
pub struct RunSummary {
    pub name: String,
    pub stage: Stage,
    pub eval: EvalFile,
    pub metrics: Vec<MetricsRecord>,
}

pub fn read_run(dir: &Path) -> Result<RunSummary, CliError> {
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    if manifest.command != "train" {
        return Err(CliError::Precondition(format!(
            "{} holds a {:?} run, report needs train runs",
            dir.display(),
            manifest.command
        )));
    }
    let stage = manifest
        .config
        .get("train.stage")
        .and_then(Value::as_str)
        .map(Stage::from_name)
        .transpose()?
        .ok_or_else(|| CliError::Precondition(format!("{}: manifest lacks train.stage", dir.display())))?;
    let eval_path = dir.join("eval.json");
    let eval: EvalFile = serde_json::from_reader(BufReader::new(File::open(&eval_path).map_err(|e| {
        CliError::Precondition(format!("{}: {e} (train with --heldout)", eval_path.display()))
    })?))?;
    let mut metrics = Vec::new();
    for (i, line) in BufReader::new(File::open(dir.join("metrics.jsonl"))?).lines().enumerate() {
        let line = line?;
        metrics.push(
            serde_json::from_str(&line).map_err(|source| direct_flow_core::Error::Record { line: i + 1, source })?,
        );
    }
    Ok(RunSummary {
        name: dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
        stage,
        eval,
        metrics,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One row per arm in table order; arms without runs have empty cells.
pub fn summarize(runs: &[RunSummary]) -> Vec<ArmRow> {
    ARMS.iter()
        .map(|(stage, name)| {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.stage == *stage).collect();
            let ev = |f: fn(&EvalFile) -> Option<f64>| mean(mine.iter().filter_map(|r| f(&r.eval)));
            ArmRow {
                arm: name.to_string(),
                runs: mine.len(),
                mean_cosine_param: mean(
                    mine.iter()
                        .flat_map(|r| r.metrics.iter().filter_map(|m| m.alignment.map(|a| a.cosine_param))),
                ),
                penetration_rate: ev(|e| Some(e.report.physics.penetration_rate)),
                energy_violation_rate: ev(|e| Some(e.report.physics.energy_violation_rate)),
                direction_consistency: ev(|e| Some(e.report.physics.direction_consistency)),
                composite: ev(|e| Some(e.report.composite)),
                fm_loss: ev(|e| Some(e.report.fm_loss)),
                drift: ev(|e| e.report.drift),
            }
        })
        .collect()
}

pub fn drift_curves(runs: &[RunSummary]) -> Vec<DriftRow> {
    runs.iter()
        .flat_map(|r| {
            r.metrics.iter().filter_map(move |m| {
                m.eval.and_then(|e| e.drift).map(|drift| DriftRow {
                    arm: arm_name(r.stage).to_string(),
                    run: r.name.clone(),
                    step: m.step,
                    drift,
                })
            })
        })
        .collect()
}

pub(crate) fn run(ctx: &Context<'_>, out: &mut OutputDir) -> Result<(), CliError> {
    let runs = ctx
        .inputs
        .iter()
        .filter(|(role, _)| role.starts_with("run."))
        .map(|(_, dir)| read_run(dir))
        .collect::<Result<Vec<_>, _>>()?;
    if runs.is_empty() {
        return Err(CliError::Usage("report needs at least one --run".into()));
    }
    let mut w = csv::Writer::from_writer(out.create_file("report.csv")?);
    for row in summarize(&runs) {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(out.create_file("drift.csv")?);
    for row in drift_curves(&runs) {
        w.serialize(row)?;
    }
    w.flush()?;
    out.manifest_mut().summary.insert("runs".into(), Value::from(runs.len()));
    Ok(())
}
