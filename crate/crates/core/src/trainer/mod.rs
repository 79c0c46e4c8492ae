//! Two-stage optimization: flow-matching pretraining, then post-training
//! with optional contrastive negatives and anchoring to a frozen copy.

mod adam;
mod eval;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use eval::{evaluate, noise_baseline, EvalConfig, EvalReport, EvalSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condition::{sample_in_batch, sample_macro_negative, NegativeSource, NegativesStore, Partition};
use crate::error::{Error, Result};
use crate::geometry::{measure_step_alignment, AlignmentReport, AlignmentSample, PhysicsProjection};
use crate::model::{Architecture, Checkpoint, VelocityField};
use crate::objectives::{direct_loss, mask_loss, Lambdas, LossBreakdown, DEFAULT_LOSS_CAP};
use crate::schedule::{interpolate, target_velocity, Schedule};
use crate::toyworld::{DatasetRecord, WorldConfig};
use crate::vecops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Sft,
    DeltaFm,
    Direct,
}

impl Stage {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "pretrain" => Ok(Stage::Pretrain),
            "sft" => Ok(Stage::Sft),
            "delta_fm" => Ok(Stage::DeltaFm),
            "direct" => Ok(Stage::Direct),
            other => Err(Error::InvalidParameter(format!(
                "unknown stage {other:?} (pretrain|sft|delta_fm|direct)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::DeltaFm => "delta_fm",
            Stage::Direct => "direct",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
    /// Parameters are rounded to single precision after every update.
    F32,
}

/// Where the random (non-hard) negative comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomNegatives {
    /// Uniform over the current batch, the anchor included.
    InBatch,
    /// Uniform over records outside the anchor's cluster.
    Mans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub lambdas: Lambdas,
    pub loss_cap: f64,
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
    pub negatives_source: NegativeSource,
    pub random_negatives: RandomNegatives,
    pub precision: Precision,
    pub schedule: Schedule,
    pub hidden: Vec<usize>,
    /// Probability of replacing the condition with the null embedding.
    pub cond_dropout: f64,
    pub log_every: usize,
    /// 0 disables periodic evaluation; the final step is always evaluated
    /// when a held-out set is supplied.
    pub eval_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Also measure the alignment of the hard-negative term.
    pub measure_hard: bool,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let base = TrainConfig {
            stage,
            steps: 5000,
            batch: 64,
            lr: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.0,
            lambdas: Lambdas::ZERO,
            loss_cap: DEFAULT_LOSS_CAP,
            seed: 0,
            k: 8,
            negatives_source: NegativeSource::Model,
            random_negatives: RandomNegatives::Mans,
            precision: Precision::F64,
            schedule: Schedule::Linear,
            hidden: vec![64, 64],
            cond_dropout: 0.0,
            log_every: 50,
            eval_every: 0,
            checkpoint_every: 0,
            measure_hard: false,
        };
        match stage {
            Stage::Pretrain => TrainConfig {
                steps: 20_000,
                lr: 1e-3,
                ..base
            },
            Stage::Sft => TrainConfig {
                lambdas: Lambdas {
                    anc: Lambdas::DIRECT.anc,
                    ..Lambdas::ZERO
                },
                ..base
            },
            Stage::DeltaFm => TrainConfig {
                lambdas: Lambdas {
                    rand: Lambdas::DIRECT.rand,
                    ..Lambdas::ZERO
                },
                random_negatives: RandomNegatives::InBatch,
                ..base
            },
            Stage::Direct => TrainConfig {
                lambdas: Lambdas::DIRECT,
                ..base
            },
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        self.adam().validate()?;
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::InvalidParameter("steps and batch must be >= 1".into()));
        }
        if !(self.loss_cap > 0.0) {
            return Err(Error::OutOfRange {
                what: "loss_cap",
                value: self.loss_cap,
                range: "(0, inf)",
            });
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::OutOfRange {
                what: "cond_dropout",
                value: self.cond_dropout,
                range: "[0, 1)",
            });
        }
        if self.log_every == 0 {
            return Err(Error::InvalidParameter("log_every must be >= 1".into()));
        }
        if self.stage == Stage::Pretrain && self.lambdas != Lambdas::ZERO {
            return Err(Error::InvalidParameter("pretraining is pure flow matching; all lambdas must be 0".into()));
        }
        Ok(())
    }
}

/// Frozen copy of the stage-1 model with its parameter hash.
#[derive(Clone, Debug)]
pub struct ReferenceModel {
    model: VelocityField,
    hash: String,
}

impl ReferenceModel {
    pub fn capture(model: &VelocityField) -> Self {
        Self {
            hash: model.param_hash(),
            model: model.clone(),
        }
    }

    pub fn model(&self) -> &VelocityField {
        &self.model
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Recomputes the hash; differs from `hash()` only if the copy changed.
    pub fn current_hash(&self) -> String {
        self.model.param_hash()
    }
}

/// Everything the loop reads; nothing here is mutated.
pub struct TrainInputs<'a> {
    pub world: &'a WorldConfig,
    pub records: &'a [DatasetRecord],
    pub embeddings: &'a [Vec<f64>],
    pub partition: Option<&'a Partition>,
    pub negatives: Option<&'a NegativesStore>,
    /// Stage-1 model; required for every post-training stage.
    pub init: Option<&'a VelocityField>,
    pub heldout: Option<EvalSet<'a>>,
    pub eval: EvalConfig,
}

/// One logged step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Batch means of the per-sample terms.
    pub loss: LossBreakdown,
    pub masked_samples: usize,
    pub skipped: bool,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment_hard: Option<AlignmentReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_hash: Option<String>,
}

/// Receives metrics in step order and periodic checkpoints.
pub trait TrainObserver {
    fn metrics(&mut self, record: &MetricsRecord) -> Result<()>;
    fn checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for Vec<MetricsRecord> {
    fn metrics(&mut self, record: &MetricsRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: VelocityField,
    pub reference: Option<ReferenceModel>,
    pub skipped_steps: usize,
    pub final_eval: Option<EvalReport>,
    pub checkpoint: Checkpoint,
}

/// Independent streams so a term's presence never shifts another's draws.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Streams {
    main: ChaCha8Rng,
    rand_pick: ChaCha8Rng,
    rand_noise: ChaCha8Rng,
    hard_pick: ChaCha8Rng,
    hard_noise: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let s = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            main: s(0),
            rand_pick: s(1),
            rand_noise: s(2),
            hard_pick: s(3),
            hard_noise: s(4),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// One assembled training example with its optional negative targets.
struct Example {
    x_t: Vec<f64>,
    t: f64,
    z: Vec<f64>,
    u_pos: Vec<f64>,
    u_rand: Option<Vec<f64>>,
    u_hard: Option<Vec<f64>>,
}

/// Produces the batch stream shared by training and diagnosis.
struct BatchAssembler<'a, 'b> {
    cfg: &'a TrainConfig,
    inp: &'a TrainInputs<'b>,
    rngs: Streams,
    draw_rand: bool,
    draw_hard: bool,
}

impl<'a, 'b> BatchAssembler<'a, 'b> {
    fn new(cfg: &'a TrainConfig, inp: &'a TrainInputs<'b>, draw_rand: bool, draw_hard: bool) -> Self {
        Self {
            cfg,
            inp,
            rngs: Streams::new(cfg.seed),
            draw_rand,
            draw_hard,
        }
    }

    fn next(&mut self, step: usize) -> Result<Vec<Example>> {
        let cfg = self.cfg;
        let inp = self.inp;
        let n = inp.records.len();
        let dim = inp.world.data_dim();
        let mut idx = Vec::with_capacity(cfg.batch);
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut eps = Vec::with_capacity(cfg.batch);
        let mut drop = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            idx.push(self.rngs.main.random_range(0..n));
            ts.push(self.rngs.main.random::<f64>());
            eps.push(normal(&mut self.rngs.main, dim));
            drop.push(cfg.cond_dropout > 0.0 && self.rngs.main.random::<f64>() < cfg.cond_dropout);
        }
        let mut out = Vec::with_capacity(cfg.batch);
        for b in 0..cfg.batch {
            let i = idx[b];
            let x_hat = &inp.records[i].traj;
            let t = ts[b];
            let z = if drop[b] {
                vec![0.0; inp.embeddings[i].len()]
            } else {
                inp.embeddings[i].clone()
            };
            let u_rand = if self.draw_rand {
                let j = match cfg.random_negatives {
                    RandomNegatives::InBatch => idx[sample_in_batch(cfg.batch, &mut self.rngs.rand_pick)],
                    RandomNegatives::Mans => {
                        let p = inp.partition.ok_or_else(|| {
                            Error::Precondition("MaNS negatives need a cluster file (partition)".into())
                        })?;
                        let j = sample_macro_negative(i, p, &mut self.rngs.rand_pick)?;
                        if p.cluster_of(j) == p.cluster_of(i) {
                            return Err(Error::Precondition(format!(
                                "MaNS exclusivity violated at step {step}"
                            )));
                        }
                        j
                    }
                };
                let noise = normal(&mut self.rngs.rand_noise, dim);
                Some(target_velocity(&inp.records[j].traj, &noise, t, cfg.schedule)?)
            } else {
                None
            };
            let u_hard = if self.draw_hard {
                let store = inp.negatives.expect("checked");
                let pick = store.choose(i, &mut self.rngs.hard_pick).map(|r| r.traj.clone());
                let noise = normal(&mut self.rngs.hard_noise, dim);
                match pick {
                    Some(traj) => Some(target_velocity(&traj, &noise, t, cfg.schedule)?),
                    None => None,
                }
            } else {
                None
            };
            out.push(Example {
                x_t: interpolate(x_hat, &eps[b], t, cfg.schedule)?,
                u_pos: target_velocity(x_hat, &eps[b], t, cfg.schedule)?,
                t,
                z,
                u_rand,
                u_hard,
            });
        }
        Ok(out)
    }
}

fn check_inputs(cfg: &TrainConfig, inp: &TrainInputs<'_>) -> Result<()> {
    let n = inp.records.len();
    if n == 0 {
        return Err(Error::Precondition("training dataset is empty".into()));
    }
    if inp.embeddings.len() != n {
        return Err(Error::Precondition(format!(
            "{} condition embeddings for {n} records",
            inp.embeddings.len()
        )));
    }
    let dim = inp.world.data_dim();
    if let Some(r) = inp.records.iter().find(|r| r.traj.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: r.traj.len(),
        });
    }
    if cfg.stage != Stage::Pretrain && inp.init.is_none() {
        return Err(Error::Precondition(format!(
            "stage {} needs a stage-1 checkpoint",
            cfg.stage.name()
        )));
    }
    if cfg.lambdas.rand > 0.0 && cfg.random_negatives == RandomNegatives::Mans {
        check_partition(inp)?;
    }
    if cfg.lambdas.hard > 0.0 && inp.negatives.is_none_or(|s| s.is_empty()) {
        return Err(Error::Precondition("MiNS needs a non-empty negatives file".into()));
    }
    Ok(())
}

fn check_partition(inp: &TrainInputs<'_>) -> Result<()> {
    let n = inp.records.len();
    let p = inp
        .partition
        .ok_or_else(|| Error::Precondition("MaNS negatives need a cluster file (partition)".into()))?;
    if p.k < 2 {
        return Err(Error::Precondition(crate::condition::MANS_POOL_ERROR.into()));
    }
    if p.assignments.len() != n {
        return Err(Error::Precondition(format!(
            "partition covers {} records, dataset has {n}",
            p.assignments.len()
        )));
    }
    Ok(())
}

fn architecture(cfg: &TrainConfig, inp: &TrainInputs<'_>) -> Architecture {
    Architecture::new(inp.world.data_dim(), inp.embeddings[0].len(), cfg.hidden.clone())
}

/// Runs `cfg.steps` optimizer steps. Deterministic for a fixed config and
/// inputs.
pub fn train(
    cfg: &TrainConfig,
    inp: &TrainInputs<'_>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_inputs(cfg, inp)?;
    let arch = architecture(cfg, inp);
    let mut model = match inp.init {
        Some(m) => {
            if m.arch() != &arch {
                return Err(Error::ArchitectureMismatch(format!(
                    "stage-1 model is {:?}, run expects {:?}",
                    m.arch(),
                    arch
                )));
            }
            m.clone()
        }
        None => VelocityField::new(arch, cfg.seed),
    };
    if cfg.stage == Stage::Pretrain && cfg.cond_dropout > 0.0 {
        model.guidance_ready = true;
    }
    if cfg.precision == Precision::F32 {
        round_f32(model.params_mut());
    }
    let reference = (cfg.stage != Stage::Pretrain).then(|| ReferenceModel::capture(&model));
    let proj = PhysicsProjection::for_world(inp.world);
    let hyper = cfg.adam();
    let mut adam = AdamState::new(model.param_count());
    let use_anchor = cfg.lambdas.anc > 0.0;
    let mut batches = BatchAssembler::new(cfg, inp, cfg.lambdas.rand > 0.0, cfg.lambdas.hard > 0.0);
    let mut grad = vec![0.0; model.param_count()];
    let inv_b = 1.0 / cfg.batch as f64;
    let mut skipped_steps = 0;
    let mut final_eval = None;

    for step in 0..cfg.steps {
        let batch = batches.next(step)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut sum = LossBreakdown::default();
        let mut masked = 0;
        let last = step + 1 == cfg.steps;
        let log_now = (step + 1) % cfg.log_every == 0 || last;
        let mut probe = Vec::new();
        let mut probe_hard = Vec::new();
        for ex in batch {
            let v = model.forward(&ex.x_t, ex.t, &ex.z)?;
            let v_ref = match (&reference, use_anchor) {
                (Some(r), true) => Some(r.model().forward(&ex.x_t, ex.t, &ex.z)?),
                _ => None,
            };
            let (bd, g_v) = direct_loss(
                &v,
                &ex.u_pos,
                ex.u_rand.as_deref(),
                ex.u_hard.as_deref(),
                v_ref.as_deref(),
                cfg.lambdas,
            )?;
            sum.fm += bd.fm;
            sum.l_rand += bd.l_rand;
            sum.l_hard += bd.l_hard;
            sum.l_anchor += bd.l_anchor;
            sum.total += bd.total;
            let (_, is_masked) = mask_loss(bd.total, cfg.loss_cap);
            if is_masked {
                masked += 1;
            } else {
                model.backward_into(&ex.x_t, ex.t, &ex.z, &vecops::scale(&g_v, inv_b), &mut grad)?;
            }
            if log_now {
                if let Some(u) = &ex.u_rand {
                    probe.push(AlignmentSample {
                        x_t: ex.x_t.clone(),
                        t: ex.t,
                        z: ex.z.clone(),
                        u_pos: ex.u_pos.clone(),
                        u_neg: u.clone(),
                    });
                }
                if let (true, Some(u)) = (cfg.measure_hard, ex.u_hard) {
                    probe_hard.push(AlignmentSample {
                        x_t: ex.x_t,
                        t: ex.t,
                        z: ex.z,
                        u_pos: ex.u_pos,
                        u_neg: u,
                    });
                }
            }
        }

        // alignment is measured at the pre-update parameters
        let alignment = if probe.is_empty() {
            None
        } else {
            Some(measure_step_alignment(&model, &probe, cfg.lambdas.rand, &proj, step)?)
        };
        let alignment_hard = if probe_hard.is_empty() {
            None
        } else {
            Some(measure_step_alignment(&model, &probe_hard, cfg.lambdas.hard, &proj, step)?)
        };

        let grad_norm = vecops::norm(&grad);
        let applied = adam_step(model.params_mut(), &grad, &mut adam, &hyper)?;
        if !applied {
            skipped_steps += 1;
        } else if cfg.precision == Precision::F32 {
            round_f32(model.params_mut());
        }
        if !vecops::all_finite(model.params()) {
            return Err(Error::NonFinite {
                what: "model parameters",
                step,
            });
        }

        if let Some(r) = &reference {
            if log_now && r.current_hash() != r.hash() {
                return Err(Error::Precondition(format!("reference model changed at step {step}")));
            }
        }
        if log_now || !applied {
            let eval_now = inp.heldout.is_some()
                && (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0));
            let eval = if eval_now {
                let e = evaluate(
                    &model,
                    inp.heldout.as_ref().expect("checked"),
                    reference.as_ref(),
                    inp.world,
                    cfg.schedule,
                    &inp.eval,
                )?;
                if last {
                    final_eval = Some(e);
                }
                Some(e)
            } else {
                None
            };
            let loss = LossBreakdown {
                fm: sum.fm * inv_b,
                l_rand: sum.l_rand * inv_b,
                l_hard: sum.l_hard * inv_b,
                l_anchor: sum.l_anchor * inv_b,
                total: sum.total * inv_b,
                masked: masked == cfg.batch,
                lambdas: Some(cfg.lambdas),
            };
            observer.metrics(&MetricsRecord {
                step,
                loss,
                masked_samples: masked,
                skipped: !applied,
                grad_norm,
                alignment,
                alignment_hard,
                eval,
                reference_hash: reference.as_ref().map(|r| r.hash().to_string()),
            })?;
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && !last {
            let rng = serde_json::to_value(&batches.rngs)?;
            observer.checkpoint(&Checkpoint::of(&model, step + 1, Some(rng)))?;
        }
    }
    let checkpoint = Checkpoint::of(&model, cfg.steps, Some(serde_json::to_value(&batches.rngs)?));
    Ok(TrainOutcome {
        model,
        reference,
        skipped_steps,
        final_eval,
        checkpoint,
    })
}

/// Replays `steps` batches of the training stream against a fixed model
/// and measures alignment of the random-negative term with weight
/// `cfg.lambdas.rand`. Nothing is updated.
pub fn diagnose(
    model: &VelocityField,
    cfg: &TrainConfig,
    inp: &TrainInputs<'_>,
    steps: usize,
) -> Result<Vec<AlignmentReport>> {
    cfg.validate()?;
    let mut probe_cfg = cfg.clone();
    probe_cfg.stage = Stage::Pretrain;
    probe_cfg.lambdas = Lambdas::ZERO;
    check_inputs(&probe_cfg, inp)?;
    if cfg.random_negatives == RandomNegatives::Mans {
        check_partition(inp)?;
    }
    if model.arch() != &architecture(cfg, inp) {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint is {:?}, data expects {:?}",
            model.arch(),
            architecture(cfg, inp)
        )));
    }
    let proj = PhysicsProjection::for_world(inp.world);
    let mut batches = BatchAssembler::new(cfg, inp, true, false);
    (0..steps)
        .map(|step| {
            let probe: Vec<AlignmentSample> = batches
                .next(step)?
                .into_iter()
                .map(|ex| AlignmentSample {
                    u_neg: ex.u_rand.expect("drawn"),
                    x_t: ex.x_t,
                    t: ex.t,
                    z: ex.z,
                    u_pos: ex.u_pos,
                })
                .collect();
            measure_step_alignment(model, &probe, cfg.lambdas.rand, &proj, step)
        })
        .collect()
}

fn round_f32(params: &mut [f64]) {
    params.iter_mut().for_each(|p| *p = *p as f32 as f64);
}

#[cfg(test)]
mod tests;
