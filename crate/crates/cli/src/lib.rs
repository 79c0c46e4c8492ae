//! Command-line runner: reproducible experiment pipelines over the toy world,
//! each writing a manifest, its outputs and their hashes into a fresh
//! directory.

mod cli;
mod commands;
pub mod config;
pub mod manifest;
pub mod report;
pub mod sweep;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use direct_flow_core::trainer::Stage;
use serde_json::Value;

use crate::config::RunConfig;
use crate::manifest::{hash_input, InputArtifact, OutputDir, RunManifest};

pub use cli::parse_invocation;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Precondition(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] direct_flow_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use direct_flow_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 4,
            CliError::Core(E::OutOfRange { .. } | E::InvalidParameter(_)) => 2,
            CliError::Core(E::NonFinite { .. }) => 4,
            _ => 3,
        }
    }
}

pub const EXIT_OK: i32 = 0;

/// A fully parsed command: everything needed to run it, and to run it again.
#[derive(Clone, Debug, PartialEq)]
pub struct Invocation {
    pub command: String,
    pub argv: Vec<String>,
    /// Config assignments in precedence order (later wins).
    pub overrides: Vec<(String, Value)>,
    pub args: BTreeMap<String, Value>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub out: PathBuf,
}

/// What a finished command reports back.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub out: PathBuf,
    pub manifest: RunManifest,
}

fn default_stage(command: &str) -> Stage {
    match command {
        "diagnose" | "sweep" => Stage::Direct,
        _ => Stage::Pretrain,
    }
}

/// Resolves the config, claims the output directory, writes the manifest
/// and runs the command.
pub fn execute(inv: &Invocation) -> Result<RunResult, CliError> {
    let (cfg, flat) = config::resolve(default_stage(&inv.command), &inv.overrides)?;
    let mut inputs = BTreeMap::new();
    for (role, path) in &inv.inputs {
        let abs = std::path::absolute(path)?;
        let sha256 = hash_input(&abs)?;
        inputs.insert(role.clone(), InputArtifact { path: abs, sha256 });
    }
    let manifest = RunManifest::new(&inv.command, &inv.argv, flat, inv.args.clone(), inputs);
    let mut out = OutputDir::create(&inv.out, manifest)?;
    let ctx = Context {
        cfg: &cfg,
        inputs: &inv.inputs,
        args: &inv.args,
    };
    commands::dispatch(&inv.command, &ctx, &mut out)?;
    let manifest = out.finish()?;
    Ok(RunResult {
        out: inv.out.clone(),
        manifest,
    })
}

/// Read-only view a command runs against.
pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub inputs: &'a BTreeMap<String, PathBuf>,
    pub args: &'a BTreeMap<String, Value>,
}

impl Context<'_> {
    pub fn input(&self, role: &str) -> Result<&Path, CliError> {
        self.inputs
            .get(role)
            .map(PathBuf::as_path)
            .ok_or_else(|| CliError::Precondition(format!("missing input: --{role}")))
    }

    pub fn optional(&self, role: &str) -> Option<&Path> {
        self.inputs.get(role).map(PathBuf::as_path)
    }
}

/// Re-runs a recorded command into `out` and checks that every output hash
/// matches the manifest.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<RunResult, CliError> {
    let recorded = RunManifest::load(manifest_path)?;
    for (role, art) in &recorded.inputs {
        let now = hash_input(&art.path)?;
        if now != art.sha256 {
            return Err(CliError::Precondition(format!(
                "input {role} ({}) changed since the recorded run",
                art.path.display()
            )));
        }
    }
    let inv = Invocation {
        command: recorded.command.clone(),
        argv: recorded.argv.clone(),
        overrides: recorded.config.clone().into_iter().collect(),
        args: recorded.args.clone(),
        inputs: recorded.inputs.iter().map(|(r, a)| (r.clone(), a.path.clone())).collect(),
        out: out.to_path_buf(),
    };
    let result = execute(&inv)?;
    if result.manifest.outputs != recorded.outputs {
        let differing: Vec<&str> = recorded
            .outputs
            .keys()
            .chain(result.manifest.outputs.keys())
            .filter(|k| recorded.outputs.get(*k) != result.manifest.outputs.get(*k))
            .map(String::as_str)
            .collect();
        return Err(CliError::Numeric(format!(
            "replay produced different outputs: {}",
            differing.join(", ")
        )));
    }
    Ok(result)
}

/// Caps the global worker pool from `DIRECT_FLOW_THREADS`.
fn init_threads() {
    if let Some(n) = std::env::var("DIRECT_FLOW_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second call in the same process finds the pool already built
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Entry point shared by the binary and tests. Diagnostics go to stderr as
/// one line; the return value is the process exit status.
pub fn run_command(argv: &[String]) -> i32 {
    init_threads();
    let parsed = match cli::parse(argv) {
        Ok(p) => p,
        Err(cli::ParseError::Clap(e)) => {
            // --help and --version also arrive here, on stdout
            let code = if e.use_stderr() { 2 } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
        Err(cli::ParseError::Cli(e)) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let result = match parsed {
        cli::Parsed::Run(inv) => execute(&inv),
        cli::Parsed::Replay { manifest, out } => replay(&manifest, &out),
    };
    match result {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}
