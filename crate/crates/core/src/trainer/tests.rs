use super::*;
use crate::condition::{kmeans_partition, mine_anchor, Condition, ConditionEncoder, MiningConfig, NegativeRenderer};
use crate::toyworld::{make_dataset, AxisRanges, DatasetConfig};

struct Fixture {
    world: WorldConfig,
    records: Vec<DatasetRecord>,
    embeddings: Vec<Vec<f64>>,
    heldout: Vec<DatasetRecord>,
    held_emb: Vec<Vec<f64>>,
    partition: Partition,
    negatives: NegativesStore,
}

fn fixture() -> Fixture {
    let world = WorldConfig {
        scene_dim: 2,
        steps: 4,
        ..WorldConfig::default()
    };
    let dc = DatasetConfig {
        n_scenes: 6,
        ..DatasetConfig::default()
    };
    let records = make_dataset(40, 1, &dc, &world).unwrap();
    let heldout = make_dataset(8, 2, &dc, &world).unwrap();
    let enc = ConditionEncoder::new(world.scene_dim, AxisRanges::default()).unwrap();
    let emb = |rs: &[DatasetRecord]| -> Vec<Vec<f64>> {
        rs.iter()
            .map(|r| enc.encode(&Condition::of(r), None).unwrap().z)
            .collect()
    };
    let embeddings = emb(&records);
    let held_emb = emb(&heldout);
    let partition = kmeans_partition(&embeddings, 3, 4, 0).unwrap();
    let mut renderer = NegativeRenderer::simulator(world.clone());
    let mut negs = Vec::new();
    for (i, r) in records.iter().enumerate() {
        negs.extend(
            mine_anchor(i, &Condition::of(r), &enc, &AxisRanges::default(), &MiningConfig::default(), &mut renderer)
                .unwrap(),
        );
    }
    Fixture {
        world,
        records,
        embeddings,
        heldout,
        held_emb,
        partition,
        negatives: NegativesStore::new(negs),
    }
}

fn small(stage: Stage, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 8,
        hidden: vec![8, 8],
        log_every: 1,
        k: 3,
        ..TrainConfig::for_stage(stage)
    }
}

fn inputs<'a>(f: &'a Fixture, init: Option<&'a VelocityField>) -> TrainInputs<'a> {
    TrainInputs {
        world: &f.world,
        records: &f.records,
        embeddings: &f.embeddings,
        partition: Some(&f.partition),
        negatives: Some(&f.negatives),
        init,
        heldout: None,
        eval: EvalConfig {
            sampler: crate::sampler::SamplerConfig {
                steps: 10,
                guidance: None,
            },
            probes: 16,
            ..EvalConfig::default()
        },
    }
}

fn run(cfg: &TrainConfig, inp: &TrainInputs<'_>) -> (TrainOutcome, Vec<MetricsRecord>) {
    let mut m = Vec::new();
    let out = train(cfg, inp, &mut m).unwrap();
    (out, m)
}

fn jsonl(m: &[MetricsRecord]) -> String {
    m.iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect()
}

fn pretrained(f: &Fixture) -> VelocityField {
    run(&small(Stage::Pretrain, 200), &inputs(f, None)).0.model
}

#[test]
fn stage_defaults() {
    let p = TrainConfig::for_stage(Stage::Pretrain);
    assert_eq!((p.steps, p.batch, p.lr), (20_000, 64, 1e-3));
    assert_eq!(p.lambdas, Lambdas::ZERO);
    let s = TrainConfig::for_stage(Stage::Sft);
    assert_eq!((s.steps, s.lr), (5000, 1e-4));
    assert_eq!((s.lambdas.rand, s.lambdas.hard, s.lambdas.anc), (0.0, 0.0, 0.2));
    let d = TrainConfig::for_stage(Stage::DeltaFm);
    assert_eq!(d.lambdas, Lambdas { rand: 0.005, hard: 0.0, anc: 0.0 });
    assert_eq!(d.random_negatives, RandomNegatives::InBatch);
    let x = TrainConfig::for_stage(Stage::Direct);
    assert_eq!(x.lambdas, Lambdas { rand: 0.005, hard: 0.02, anc: 0.2 });
    assert_eq!(x.betas, [0.9, 0.999]);
    assert_eq!(x.loss_cap, 50.0);
}

#[test]
fn pretraining_reduces_loss() {
    let f = fixture();
    let (_, m) = run(&small(Stage::Pretrain, 300), &inputs(&f, None));
    let head: f64 = m[..20].iter().map(|r| r.loss.fm).sum::<f64>() / 20.0;
    let tail: f64 = m[m.len() - 20..].iter().map(|r| r.loss.fm).sum::<f64>() / 20.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
    assert!(m.iter().all(|r| r.reference_hash.is_none()));
}

#[test]
fn fixed_seed_is_byte_identical() {
    let f = fixture();
    let init = pretrained(&f);
    let cfg = small(Stage::Direct, 30);
    let (a, ma) = run(&cfg, &inputs(&f, Some(&init)));
    let (b, mb) = run(&cfg, &inputs(&f, Some(&init)));
    assert_eq!(jsonl(&ma), jsonl(&mb));
    assert_eq!(a.model.param_hash(), b.model.param_hash());
    assert!(ma.iter().all(|r| r.alignment.is_some()));
}

#[test]
fn zero_lambda_direct_equals_plain_sft() {
    let f = fixture();
    let init = pretrained(&f);
    let direct = TrainConfig {
        lambdas: Lambdas::ZERO,
        ..small(Stage::Direct, 40)
    };
    let sft = TrainConfig {
        lambdas: Lambdas::ZERO,
        ..small(Stage::Sft, 40)
    };
    let (a, ma) = run(&direct, &inputs(&f, Some(&init)));
    let (b, mb) = run(&sft, &inputs(&f, Some(&init)));
    assert_eq!(jsonl(&ma), jsonl(&mb));
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn reference_stays_frozen() {
    let f = fixture();
    let init = pretrained(&f);
    let (out, m) = run(&small(Stage::Direct, 25), &inputs(&f, Some(&init)));
    let h = init.param_hash();
    assert!(m.iter().all(|r| r.reference_hash.as_deref() == Some(h.as_str())));
    assert_eq!(out.reference.unwrap().current_hash(), h);
    assert_ne!(out.model.param_hash(), h);
}

#[test]
fn anchoring_term_is_reported() {
    let f = fixture();
    let init = pretrained(&f);
    let (_, m) = run(&small(Stage::Sft, 10), &inputs(&f, Some(&init)));
    // the first step starts at the reference, so the anchor term is zero
    assert_eq!(m[0].loss.l_anchor, 0.0);
    assert!(m[9].loss.l_anchor > 0.0);
    assert!(m.iter().all(|r| r.loss.l_rand == 0.0 && r.loss.l_hard == 0.0));
}

#[test]
fn preconditions_name_the_missing_artifact() {
    let f = fixture();
    let init = pretrained(&f);
    let mut m = Vec::new();
    let err = train(&small(Stage::Sft, 5), &inputs(&f, None), &mut m).unwrap_err();
    assert!(err.to_string().contains("stage-1 checkpoint"));

    let mut inp = inputs(&f, Some(&init));
    inp.partition = None;
    let err = train(&small(Stage::Direct, 5), &inp, &mut m).unwrap_err();
    assert!(err.to_string().contains("partition"));
    // in-batch negatives do not need one
    train(&small(Stage::DeltaFm, 5), &inp, &mut m).unwrap();

    let mut inp = inputs(&f, Some(&init));
    inp.negatives = None;
    let err = train(&small(Stage::Direct, 5), &inp, &mut m).unwrap_err();
    assert!(err.to_string().contains("negatives"));

    let one = Partition {
        k: 1,
        assignments: vec![0; f.records.len()],
        centroids: vec![vec![0.0; 16]],
        ..f.partition.clone()
    };
    let mut inp = inputs(&f, Some(&init));
    inp.partition = Some(&one);
    let err = train(&small(Stage::Direct, 5), &inp, &mut m).unwrap_err();
    assert!(err.to_string().contains(crate::condition::MANS_POOL_ERROR));

    let wrong = VelocityField::new(Architecture::new(6, 16, vec![4]), 0);
    let err = train(&small(Stage::Sft, 5), &inputs(&f, Some(&wrong)), &mut m).unwrap_err();
    assert!(matches!(err, Error::ArchitectureMismatch(_)));
}

#[test]
fn mask_everything_freezes_params() {
    let f = fixture();
    let init = pretrained(&f);
    let cfg = TrainConfig {
        loss_cap: 1e-12,
        ..small(Stage::Sft, 5)
    };
    let (out, m) = run(&cfg, &inputs(&f, Some(&init)));
    assert!(m.iter().all(|r| r.masked_samples == 8 && r.loss.masked));
    assert_eq!(out.model.params(), init.params());
}

#[test]
fn f32_precision_keeps_single_precision_params() {
    let f = fixture();
    let cfg = TrainConfig {
        precision: Precision::F32,
        ..small(Stage::Pretrain, 20)
    };
    let (out, _) = run(&cfg, &inputs(&f, None));
    assert!(out.model.params().iter().all(|p| (*p as f32) as f64 == *p));
}

#[test]
fn evaluation_and_drift() {
    let f = fixture();
    let init = pretrained(&f);
    let mut inp = inputs(&f, Some(&init));
    inp.heldout = Some(EvalSet {
        records: &f.heldout,
        embeddings: &f.held_emb,
    });
    let same = ReferenceModel::capture(&init);
    let e = evaluate(&init, inp.heldout.as_ref().unwrap(), Some(&same), &f.world, Schedule::Linear, &inp.eval).unwrap();
    assert_eq!(e.drift, Some(0.0));
    assert_eq!(e.n, 8);
    let (out, m) = run(&small(Stage::Sft, 10), &inp);
    let fe = out.final_eval.unwrap();
    assert!(fe.drift.unwrap() > 0.0);
    assert_eq!(m.last().unwrap().eval, Some(fe));
    assert!(m[..9].iter().all(|r| r.eval.is_none()));
}

#[test]
fn guidance_flag_follows_dropout() {
    let f = fixture();
    let cfg = TrainConfig {
        cond_dropout: 0.1,
        ..small(Stage::Pretrain, 5)
    };
    assert!(run(&cfg, &inputs(&f, None)).0.model.guidance_ready);
    assert!(!run(&small(Stage::Pretrain, 5), &inputs(&f, None)).0.model.guidance_ready);
}

#[test]
fn checkpoints_reach_the_observer() {
    struct Sink(Vec<usize>);
    impl TrainObserver for Sink {
        fn metrics(&mut self, _: &MetricsRecord) -> Result<()> {
            Ok(())
        }
        fn checkpoint(&mut self, c: &Checkpoint) -> Result<()> {
            self.0.push(c.step);
            Ok(())
        }
    }
    let f = fixture();
    let cfg = TrainConfig {
        checkpoint_every: 4,
        ..small(Stage::Pretrain, 10)
    };
    let mut s = Sink(Vec::new());
    let out = train(&cfg, &inputs(&f, None), &mut s).unwrap();
    assert_eq!(s.0, vec![4, 8]);
    assert_eq!(out.checkpoint.step, 10);
    assert!(out.checkpoint.rng.is_some());
}

#[test]
fn diagnose_replays_the_training_stream() {
    let f = fixture();
    let init = pretrained(&f);
    let cfg = TrainConfig {
        lr: 1e-12,
        ..small(Stage::DeltaFm, 3)
    };
    let (_, m) = run(&cfg, &inputs(&f, Some(&init)));
    let d = diagnose(&init, &cfg, &inputs(&f, Some(&init)), 3).unwrap();
    assert_eq!(d.len(), 3);
    // first step sees identical parameters and batch
    assert_eq!(Some(d[0]), m[0].alignment);
    let zero = TrainConfig {
        lambdas: Lambdas::ZERO,
        ..cfg
    };
    let d0 = diagnose(&init, &zero, &inputs(&f, Some(&init)), 2).unwrap();
    assert!(d0.iter().all(|r| r.cosine_param == 0.0));
    assert_eq!(d0[0].inner_product, d[0].inner_product);
}
