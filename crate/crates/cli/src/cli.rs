use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::config::{parse_assignment, read_config_file};
use crate::{CliError, Invocation};

#[derive(Parser, Debug)]
#[command(name = "direct-flow", version, about = "Contrastive flow-matching experiments on a toy bouncing-ball world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat JSON object of dotted config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lambdas.anc=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; must be new or empty.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate a dataset of conditioned trajectories.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Partition the condition embeddings of a dataset with k-means.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mine single-axis hard negatives for every dataset record.
    MineNegatives {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint; required when rendering with the model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long, value_parser = ["model", "simulator"])]
        source: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain or post-train a velocity model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["pretrain", "sft", "delta_fm", "direct"])]
        stage: Option<String>,
        /// Stage-1 checkpoint to post-train from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        clusters: Option<PathBuf>,
        #[arg(long)]
        negatives: Option<PathBuf>,
        /// Held-out dataset evaluated at the end (and every `train.eval_every`).
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw one trajectory per condition with the Euler sampler.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL of `{scene, params}` lines; dataset files qualify.
        #[arg(long)]
        conditions: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale; 0 disables guidance.
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a held-out dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Reference checkpoint for the drift probe.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Measure gradient alignment of the random-negative term along the
    /// training batch stream, without updating the model.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clusters: Option<PathBuf>,
        #[arg(long, value_parser = ["pretrain", "sft", "delta_fm", "direct"])]
        stage: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Post-train once per setting of one parameter and tabulate the results.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `k`, `lambdas` (greedy anc, then rand, then hard) or any config key.
        #[arg(long)]
        param: String,
        /// Comma-separated values; optional for `lambdas`.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        negatives: Option<PathBuf>,
        #[arg(long)]
        heldout: PathBuf,
    },
    /// Summarize finished training runs by ablation arm.
    Report {
        #[command(flatten)]
        common: Common,
        /// A finished `train` output directory. Repeatable.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
    },
    /// Re-run a recorded command and verify its output hashes.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub(crate) enum Parsed {
    Run(Invocation),
    Replay { manifest: PathBuf, out: PathBuf },
}

pub(crate) enum ParseError {
    Clap(clap::Error),
    Cli(CliError),
}

struct Builder {
    overrides: Vec<(String, Value)>,
    inputs: BTreeMap<String, PathBuf>,
    args: BTreeMap<String, Value>,
}

impl Builder {
    fn new(common: &Common) -> Result<Self, CliError> {
        let mut overrides: Vec<(String, Value)> = match &common.config {
            Some(p) => read_config_file(p)?.into_iter().collect(),
            None => Vec::new(),
        };
        for s in &common.set {
            overrides.push(parse_assignment(s)?);
        }
        Ok(Self {
            overrides,
            inputs: BTreeMap::new(),
            args: BTreeMap::new(),
        })
    }

    fn flag<T: Into<Value>>(&mut self, key: &str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.overrides.push((key.to_string(), v.into()));
        }
        self
    }

    fn input(&mut self, role: &str, p: Option<PathBuf>) -> &mut Self {
        if let Some(p) = p {
            self.inputs.insert(role.to_string(), p);
        }
        self
    }
}

pub(crate) fn parse(argv: &[String]) -> Result<Parsed, ParseError> {
    let cli = Cli::try_parse_from(argv).map_err(ParseError::Clap)?;
    let argv = argv.get(1..).unwrap_or_default().to_vec();
    let (command, common, b) = match cli.cmd {
        Cmd::Replay { manifest, out } => return Ok(Parsed::Replay { manifest, out }),
        Cmd::GenData { common, n, seed } => {
            let mut b = Builder::new(&common).map_err(ParseError::Cli)?;
            b.flag("data.n", n).flag("data.seed", seed);
            ("gen-data", common, b)
        }
        Cmd::Cluster {
            common,
            data,
            k,
            restarts,
            seed,
        } => {
            let mut b = Builder::new(&common).map_err(ParseError::Cli)?;
            b.flag("cluster.k", k)
                .flag("cluster.restarts", restarts)
                .flag("cluster.seed", seed)
                .input("data", Some(data));
            ("cluster", common, b)
        }
        Cmd::MineNegatives {
            common,
            data,
            checkpoint,
            candidates,
            threshold,
            top,
            source,
            seed,
        } => {
            let mut b = Builder::new(&common).map_err(ParseError::Cli)?;
            b.flag("negatives.candidates", candidates)
                .flag("negatives.threshold", threshold)
                .flag("negatives.top", top)
                .flag("negatives.source", source)
                .flag("negatives.seed", seed)
                .input("data", Some(data))
                .input("checkpoint", checkpoint);
            ("mine-negatives", common, b)
        }
        Cmd::Train {
            common,
            data,
            stage,
            init,
            clusters,
            negatives,
            heldout,
            steps,
            seed,
        } => {
            let mut b = Builder::new(&common).map_err(ParseError::Cli)?;
            b.flag("train.stage", stage)
                .flag("train.steps", steps)
                .flag("train.seed", seed)
                .input("data", Some(data))
                .input("init", init)
                .input("clusters", clusters)
                .input("negatives", negatives)
                .input("heldout", heldout);
            ("train", common, b)
        }
        Cmd::Sample {
            common,
            checkpoint,
            conditions,
            steps,
            guidance,
            seed,
        } => {
            let mut b = Builder::new(&common).map_err(ParseError::Cli)?;
            let guidance = guidance.map(|g| if g == 0.0 { Value::Null } else { Value::from(g) });
            b.flag("sampler.steps", steps)
                .flag("sampler.guidance", guidance)
                .flag("sample.seed", seed)
                .input("checkpoint", Some(checkpoint))
                .input("conditions", Some(conditions));
            ("sample", common, b)
        }
        Cmd::Evaluate {
            common,
            checkpoint,
            data,
            reference,
        } => {
            let mut b = Builder::new(&common).map_err(ParseError::Cli)?;
            b.input("checkpoint", Some(checkpoint))
                .input("data", Some(data))
                .input("reference", reference);
            ("evaluate", common, b)
        }
        Cmd::Diagnose {
            common,
            checkpoint,
            data,
            clusters,
            stage,
            steps,
        } => {
            let mut b = Builder::new(&common).map_err(ParseError::Cli)?;
            b.flag("train.stage", stage)
                .flag("diagnose.steps", steps)
                .input("checkpoint", Some(checkpoint))
                .input("data", Some(data))
                .input("clusters", clusters);
            ("diagnose", common, b)
        }
        Cmd::Sweep {
            common,
            param,
            values,
            data,
            init,
            negatives,
            heldout,
        } => {
            let mut b = Builder::new(&common).map_err(ParseError::Cli)?;
            b.input("data", Some(data))
                .input("init", Some(init))
                .input("negatives", negatives)
                .input("heldout", Some(heldout));
            b.args.insert("param".into(), Value::from(param));
            if let Some(v) = values {
                b.args.insert("values".into(), Value::from(v));
            }
            ("sweep", common, b)
        }
        Cmd::Report { common, runs } => {
            let mut b = Builder::new(&common).map_err(ParseError::Cli)?;
            for (i, r) in runs.into_iter().enumerate() {
                b.input(&format!("run.{i:03}"), Some(r));
            }
            ("report", common, b)
        }
    };
    Ok(Parsed::Run(Invocation {
        command: command.to_string(),
        argv,
        overrides: b.overrides,
        args: b.args,
        inputs: b.inputs,
        out: common.out,
    }))
}

/// Parses a command line (program name first) into an invocation.
pub fn parse_invocation(argv: &[String]) -> Result<Invocation, CliError> {
    match parse(argv) {
        Ok(Parsed::Run(inv)) => Ok(inv),
        Ok(Parsed::Replay { .. }) => Err(CliError::Usage("replay is not a runnable invocation".into())),
        Err(ParseError::Clap(e)) => Err(CliError::Usage(e.to_string())),
        Err(ParseError::Cli(e)) => Err(e),
    }
}
