use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use direct_flow_core::condition::{
    filter_candidates, generate_candidates, kmeans_partition, mine_anchor, read_negatives, write_negatives,
    Condition, ConditionEncoder, NegativeRecord, NegativeRenderer, NegativeSource, NegativesStore, Partition,
    PerturbationAxis,
};
use direct_flow_core::model::{Architecture, Checkpoint, VelocityField};
use direct_flow_core::sampler::euler_sample_flat;
use direct_flow_core::toyworld::{
    make_dataset, physics_score, read_dataset, write_dataset, DatasetRecord, PhysicsParams, SceneCode, ScoreReport,
    TrajectorySample,
};
use direct_flow_core::trainer::{
    diagnose, evaluate, noise_baseline, train, EvalReport, EvalSet, MetricsRecord, ReferenceModel, TrainInputs,
    TrainObserver, TrainOutcome,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::OutputDir;
use crate::{CliError, Context};

pub(crate) fn dispatch(command: &str, ctx: &Context<'_>, out: &mut OutputDir) -> Result<(), CliError> {
    match command {
        "gen-data" => gen_data(ctx, out),
        "cluster" => cluster(ctx, out),
        "mine-negatives" => mine_negatives(ctx, out),
        "train" => train_cmd(ctx, out),
        "sample" => sample(ctx, out),
        "evaluate" => evaluate_cmd(ctx, out),
        "diagnose" => diagnose_cmd(ctx, out),
        "sweep" => crate::sweep::run(ctx, out),
        "report" => crate::report::run(ctx, out),
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}

fn note(out: &mut OutputDir, key: &str, value: impl Serialize) -> Result<(), CliError> {
    out.manifest_mut().summary.insert(key.to_string(), serde_json::to_value(value)?);
    Ok(())
}

pub(crate) fn write_json(out: &mut OutputDir, name: &str, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(out.file(name), text + "\n")?;
    Ok(())
}

pub(crate) fn load_records(path: &Path, cfg: &RunConfig) -> Result<Vec<DatasetRecord>, CliError> {
    let records = read_dataset(path)?;
    if records.is_empty() {
        return Err(CliError::Precondition(format!("dataset {} is empty", path.display())));
    }
    let dim = cfg.world.data_dim();
    if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.traj.len() != dim) {
        return Err(CliError::Precondition(format!(
            "record {i} of {} has {} values, world.* expects {dim}",
            path.display(),
            r.traj.len()
        )));
    }
    Ok(records)
}

pub(crate) fn encoder(cfg: &RunConfig) -> Result<ConditionEncoder, CliError> {
    Ok(ConditionEncoder::with_spec(cfg.world.scene_dim, cfg.data.ranges.clone(), &cfg.encoder)?)
}

pub(crate) fn embed(enc: &ConditionEncoder, records: &[DatasetRecord]) -> Result<Vec<Vec<f64>>, CliError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| Ok(enc.encode(&Condition::of(r), Some(i))?.z))
        .collect()
}

/// Loads a checkpoint whose input and output widths fit this config.
pub(crate) fn load_model(path: &Path, cfg: &RunConfig) -> Result<VelocityField, CliError> {
    let model = Checkpoint::load(path)?.model()?;
    let arch = model.arch();
    if arch.data_dim != cfg.world.data_dim() || arch.cond_dim != cfg.encoder.dim {
        return Err(direct_flow_core::Error::ArchitectureMismatch(format!(
            "checkpoint {} has data_dim {} and cond_dim {}, config expects {} and {}",
            path.display(),
            arch.data_dim,
            arch.cond_dim,
            cfg.world.data_dim(),
            cfg.encoder.dim
        ))
        .into());
    }
    Ok(model)
}

pub(crate) fn load_partition(path: &Path, embeddings: &[Vec<f64>]) -> Result<Partition, CliError> {
    let p: Partition = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| CliError::Precondition(format!("cluster file {}: {e}", path.display())))?;
    p.validate(embeddings)
        .map_err(|e| CliError::Precondition(format!("cluster file {} does not fit the dataset: {e}", path.display())))?;
    Ok(p)
}

pub(crate) fn write_partition(path: &Path, p: &Partition) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string(p)? + "\n")?;
    Ok(())
}

fn gen_data(ctx: &Context<'_>, out: &mut OutputDir) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let records = make_dataset(cfg.data.n, cfg.data.seed, &cfg.data.dataset(), &cfg.world)?;
    write_dataset(&out.file("dataset.jsonl"), &records)?;
    note(out, "records", records.len())
}

/// Fraction of records whose cluster's most common scene is their own.
fn scene_purity(records: &[DatasetRecord], p: &Partition) -> f64 {
    let mut counts: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = direct_flow_core::hashing::hash_f64s(r.scene.as_slice());
        *counts.entry(p.cluster_of(i)).or_default().entry(key).or_default() += 1;
    }
    let majority: usize = counts.values().map(|c| c.values().max().copied().unwrap_or(0)).sum();
    majority as f64 / records.len() as f64
}

fn cluster(ctx: &Context<'_>, out: &mut OutputDir) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let records = load_records(ctx.input("data")?, cfg)?;
    let points = embed(&encoder(cfg)?, &records)?;
    let p = kmeans_partition(&points, cfg.cluster.k, cfg.cluster.restarts, cfg.cluster.seed)?;
    write_partition(&out.file("clusters.json"), &p)?;
    note(out, "inertia", p.inertia)?;
    note(out, "sizes", p.sizes())?;
    note(out, "scene_purity", scene_purity(&records, &p))
}

#[derive(Serialize)]
struct MiningStats {
    anchors: usize,
    candidates: usize,
    accepted: usize,
    retained: usize,
    anchors_without_negatives: usize,
    retained_by_axis: BTreeMap<String, usize>,
    mean_cosine: f64,
}

fn mine_negatives(ctx: &Context<'_>, out: &mut OutputDir) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let mcfg = &cfg.negatives;
    mcfg.validate()?;
    let records = load_records(ctx.input("data")?, cfg)?;
    let enc = encoder(cfg)?;
    let ranges = &cfg.data.ranges;
    let model = match mcfg.source {
        NegativeSource::Model => {
            let path = ctx.optional("checkpoint").ok_or_else(|| {
                CliError::Precondition("model-rendered negatives need a stage-1 checkpoint (--checkpoint)".into())
            })?;
            Some(load_model(path, cfg)?)
        }
        NegativeSource::Simulator => None,
    };
    // anchors are independent, so each gets its own renderer
    let per_anchor: Vec<(usize, Vec<NegativeRecord>)> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let anchor = Condition::of(r);
            let mut renderer = match &model {
                Some(m) => NegativeRenderer::from_model(m, cfg.sampler.clone(), cfg.world.clone()),
                None => NegativeRenderer::simulator(cfg.world.clone()),
            };
            let anchor_z = enc.encode(&anchor, Some(i))?.z;
            let zs: Vec<Vec<f64>> = generate_candidates(i, &anchor, &enc, ranges, mcfg)?
                .into_iter()
                .map(|c| c.z)
                .collect();
            let accepted = filter_candidates(&anchor_z, &zs, mcfg.threshold, usize::MAX).len();
            let kept = mine_anchor(i, &anchor, &enc, ranges, mcfg, &mut renderer)?;
            Ok((accepted, kept))
        })
        .collect::<Result<_, CliError>>()?;
    let mut stats = MiningStats {
        anchors: records.len(),
        candidates: records.len() * mcfg.candidates,
        accepted: 0,
        retained: 0,
        anchors_without_negatives: 0,
        retained_by_axis: PerturbationAxis::ALL.iter().map(|a| (axis_name(*a), 0)).collect(),
        mean_cosine: 0.0,
    };
    let mut all = Vec::new();
    for (accepted, kept) in per_anchor {
        stats.accepted += accepted;
        if kept.is_empty() {
            stats.anchors_without_negatives += 1;
        }
        for r in kept {
            *stats.retained_by_axis.entry(axis_name(r.axis)).or_default() += 1;
            stats.mean_cosine += r.cosine;
            all.push(r);
        }
    }
    stats.retained = all.len();
    if !all.is_empty() {
        stats.mean_cosine /= all.len() as f64;
    }
    write_negatives(&out.file("negatives.jsonl"), &all)?;
    write_json(out, "mining.json", &stats)?;
    note(out, "retained", stats.retained)
}

fn axis_name(a: PerturbationAxis) -> String {
    serde_json::to_value(a)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_else(|| format!("{a:?}"))
}

/// Everything a training run reads from disk.
pub(crate) struct LoadedTraining {
    pub records: Vec<DatasetRecord>,
    pub embeddings: Vec<Vec<f64>>,
    pub partition: Option<Partition>,
    pub negatives: Option<NegativesStore>,
    pub init: Option<VelocityField>,
    pub heldout: Option<(Vec<DatasetRecord>, Vec<Vec<f64>>)>,
}

impl LoadedTraining {
    pub fn inputs<'a>(&'a self, cfg: &'a RunConfig) -> TrainInputs<'a> {
        TrainInputs {
            world: &cfg.world,
            records: &self.records,
            embeddings: &self.embeddings,
            partition: self.partition.as_ref(),
            negatives: self.negatives.as_ref(),
            init: self.init.as_ref(),
            heldout: self.heldout.as_ref().map(|(r, e)| EvalSet {
                records: r,
                embeddings: e,
            }),
            eval: cfg.eval_config(),
        }
    }
}

pub(crate) fn load_training(ctx: &Context<'_>) -> Result<LoadedTraining, CliError> {
    let cfg = ctx.cfg;
    let enc = encoder(cfg)?;
    let records = load_records(ctx.input("data")?, cfg)?;
    let embeddings = embed(&enc, &records)?;
    let partition = ctx.optional("clusters").map(|p| load_partition(p, &embeddings)).transpose()?;
    let negatives = ctx
        .optional("negatives")
        .map(|p| read_negatives(p).map(NegativesStore::new))
        .transpose()?;
    let init = match ctx.optional("init") {
        Some(p) => {
            let arch = Architecture::new(cfg.world.data_dim(), cfg.encoder.dim, cfg.train.hidden.clone());
            Some(Checkpoint::load_expecting(p, &arch)?.model()?)
        }
        None => None,
    };
    let heldout = match ctx.optional("heldout") {
        Some(p) => {
            let r = load_records(p, cfg)?;
            let e = embed(&enc, &r)?;
            Some((r, e))
        }
        None => None,
    };
    Ok(LoadedTraining {
        records,
        embeddings,
        partition,
        negatives,
        init,
        heldout,
    })
}

/// Streams metrics to JSONL and periodic checkpoints into the output dir.
struct FileObserver<'o> {
    out: &'o mut OutputDir,
    metrics: BufWriter<File>,
}

impl TrainObserver for FileObserver<'_> {
    fn metrics(&mut self, record: &MetricsRecord) -> direct_flow_core::Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    fn checkpoint(&mut self, checkpoint: &Checkpoint) -> direct_flow_core::Result<()> {
        checkpoint.save(&self.out.file(&format!("checkpoint-step{:06}.json", checkpoint.step)))
    }
}

#[derive(Serialize, Deserialize)]
pub struct EvalFile {
    pub report: EvalReport,
    pub pretrain_fm_bound: f64,
    pub fm_below_bound: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_baseline: Option<ScoreReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_hash: Option<String>,
}

fn eval_file(cfg: &RunConfig, report: EvalReport, reference: Option<&ReferenceModel>) -> EvalFile {
    EvalFile {
        report,
        pretrain_fm_bound: cfg.eval.pretrain_fm_bound,
        fm_below_bound: report.fm_loss < cfg.eval.pretrain_fm_bound,
        noise_baseline: None,
        reference_hash: reference.map(|r| r.hash().to_string()),
    }
}

fn train_cmd(ctx: &Context<'_>, out: &mut OutputDir) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let loaded = load_training(ctx)?;
    let metrics = BufWriter::new(out.create_file("metrics.jsonl")?);
    let mut obs = FileObserver { out, metrics };
    let outcome: TrainOutcome = train(&cfg.train, &loaded.inputs(cfg), &mut obs)?;
    obs.metrics.flush()?;
    drop(obs);
    outcome.checkpoint.save(&out.file("checkpoint.json"))?;
    if let Some(e) = outcome.final_eval {
        write_json(out, "eval.json", &eval_file(cfg, e, outcome.reference.as_ref()))?;
    }
    note(out, "skipped_steps", outcome.skipped_steps)?;
    note(out, "param_hash", outcome.model.param_hash())?;
    if let Some(r) = &outcome.reference {
        note(out, "reference_hash", r.hash())?;
    }
    Ok(())
}

/// A condition line; extra fields such as `traj` are ignored.
#[derive(Deserialize)]
struct ConditionLine {
    scene: SceneCode,
    params: PhysicsParams,
}

#[derive(Serialize)]
struct SampleLine {
    index: usize,
    seed: u64,
    traj: Vec<f64>,
    score: ScoreReport,
}

fn read_conditions(path: &Path) -> Result<Vec<Condition>, CliError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: ConditionLine = serde_json::from_str(&line)
            .map_err(|source| direct_flow_core::Error::Record { line: i + 1, source })?;
        c.params.validate()?;
        out.push(Condition::new(c.scene, c.params));
    }
    Ok(out)
}

fn sample(ctx: &Context<'_>, out: &mut OutputDir) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let model = load_model(ctx.input("checkpoint")?, cfg)?;
    let conds = read_conditions(ctx.input("conditions")?)?;
    let enc = encoder(cfg)?;
    let lines: Vec<SampleLine> = conds
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let seed = cfg.sample.seed.wrapping_add(i as u64);
            let z = enc.encode(c, None)?.z;
            let traj = euler_sample_flat(&model, &z, &cfg.sampler, seed)?;
            let score = physics_score(&TrajectorySample::from_flat(&traj, cfg.world.scene_dim)?, &c.params, &cfg.world);
            Ok(SampleLine { index: i, seed, traj, score })
        })
        .collect::<Result<_, CliError>>()?;
    let mut w = BufWriter::new(out.create_file("samples.jsonl")?);
    for l in &lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mean = ScoreReport::mean(&lines.iter().map(|l| l.score).collect::<Vec<_>>());
    note(out, "samples", lines.len())?;
    note(out, "composite", mean.composite())
}

fn evaluate_cmd(ctx: &Context<'_>, out: &mut OutputDir) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let model = load_model(ctx.input("checkpoint")?, cfg)?;
    let reference = ctx
        .optional("reference")
        .map(|p| load_model(p, cfg).map(|m| ReferenceModel::capture(&m)))
        .transpose()?;
    let records = load_records(ctx.input("data")?, cfg)?;
    let embeddings = embed(&encoder(cfg)?, &records)?;
    let set = EvalSet {
        records: &records,
        embeddings: &embeddings,
    };
    let report = evaluate(&model, &set, reference.as_ref(), &cfg.world, cfg.train.schedule, &cfg.eval_config())?;
    let mut file = eval_file(cfg, report, reference.as_ref());
    file.noise_baseline = Some(noise_baseline(&records, &cfg.world, cfg.eval.seed)?);
    write_json(out, "eval.json", &file)?;
    note(out, "composite", report.composite)?;
    note(out, "fm_loss", report.fm_loss)
}

fn diagnose_cmd(ctx: &Context<'_>, out: &mut OutputDir) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let model = load_model(ctx.input("checkpoint")?, cfg)?;
    let loaded = load_training(ctx)?;
    let mut inputs = loaded.inputs(cfg);
    inputs.init = Some(&model);
    let reports = diagnose(&model, &cfg.train, &inputs, cfg.diagnose.steps)?;
    let mut w = csv::Writer::from_writer(out.create_file("alignment.csv")?);
    for r in &reports {
        w.serialize(r)?;
    }
    w.flush()?;
    let n = reports.len().max(1) as f64;
    note(out, "mean_cosine_param", reports.iter().map(|r| r.cosine_param).sum::<f64>() / n)?;
    note(
        out,
        "condition_met_fraction",
        reports.iter().filter(|r| r.condition_met).count() as f64 / n,
    )?;
    note(out, "steps", json!(reports.len()))
}
