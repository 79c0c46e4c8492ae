//! Run manifests and locked output directories.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use direct_flow_core::hashing::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::FlatConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputArtifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: FlatConfig,
    /// Command arguments that are not config keys (e.g. the swept parameter).
    #[serde(default)]
    pub args: BTreeMap<String, Value>,
    pub inputs: BTreeMap<String, InputArtifact>,
    pub seeds: BTreeMap<String, Value>,
    pub tool_version: String,
    pub started: String,
    pub finished: Option<String>,
    /// File name inside the output directory to its sha256.
    pub outputs: BTreeMap<String, String>,
    /// Command-specific facts such as the reference hash or mining counts.
    #[serde(default)]
    pub summary: BTreeMap<String, Value>,
    pub status: RunStatus,
}

impl RunManifest {
    pub fn new(
        command: &str,
        argv: &[String],
        config: FlatConfig,
        args: BTreeMap<String, Value>,
        inputs: BTreeMap<String, InputArtifact>,
    ) -> Self {
        let seeds = config
            .iter()
            .filter(|(k, _)| k.ends_with("seed"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config,
            args,
            inputs,
            seeds,
            tool_version: tool_version(),
            started: now(),
            finished: None,
            outputs: BTreeMap::new(),
            summary: BTreeMap::new(),
            status: RunStatus::Running,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Precondition(format!("manifest {}: {e}", path.display())))
    }
}

pub fn tool_version() -> String {
    format!("direct-flow {}", env!("CARGO_PKG_VERSION"))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Hash of an input: the file bytes, or for a directory the sorted
/// `(name, hash)` pairs of the files directly inside it. A run directory's
/// manifest contributes only its config echo, since it also carries
/// timestamps.
pub fn hash_input(path: &Path) -> Result<String, CliError> {
    if path.is_dir() {
        let mut parts = Vec::new();
        let mut names: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        names.sort();
        for p in names {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if name == MANIFEST_FILE {
                let config = RunManifest::load(&p)?.config;
                parts.push(format!("{name}:{}", sha256_hex(serde_json::to_string(&config)?.as_bytes())));
            } else if p.is_file() && name != LOCK_FILE {
                parts.push(format!("{name}:{}", sha256_hex(&fs::read(&p)?)));
            }
        }
        Ok(sha256_hex(parts.join("\n").as_bytes()))
    } else {
        let bytes = fs::read(path).map_err(|e| CliError::Precondition(format!("cannot read input {}: {e}", path.display())))?;
        Ok(sha256_hex(&bytes))
    }
}

/// An output directory owned by one process for the length of a run.
pub struct OutputDir {
    root: PathBuf,
    created_root: bool,
    files: Vec<String>,
    manifest: RunManifest,
    done: bool,
}

impl OutputDir {
    /// Claims `root` (new or empty) and writes the initial manifest.
    pub fn create(root: &Path, manifest: RunManifest) -> Result<Self, CliError> {
        let created_root = !root.exists();
        if created_root {
            fs::create_dir_all(root)?;
        } else if !root.is_dir() {
            return Err(CliError::Precondition(format!("output {} is not a directory", root.display())));
        }
        let lock = OpenOptions::new().write(true).create_new(true).open(root.join(LOCK_FILE));
        if lock.is_err() {
            return Err(CliError::Precondition(format!(
                "output directory {} is locked by another run",
                root.display()
            )));
        }
        let foreign = fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .any(|e| e.file_name() != LOCK_FILE);
        if foreign {
            let _ = fs::remove_file(root.join(LOCK_FILE));
            return Err(CliError::Precondition(format!(
                "output directory {} is not empty",
                root.display()
            )));
        }
        let dir = Self {
            root: root.to_path_buf(),
            created_root,
            files: Vec::new(),
            manifest,
            done: false,
        };
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_mut(&mut self) -> &mut RunManifest {
        &mut self.manifest
    }

    /// Registers an output file and returns its path.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.root.join(name)
    }

    pub fn create_file(&mut self, name: &str) -> Result<File, CliError> {
        Ok(File::create(self.file(name))?)
    }

    fn write_manifest(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.root.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    /// Hashes every output, completes the manifest and releases the lock.
    pub fn finish(mut self) -> Result<RunManifest, CliError> {
        let mut outputs = BTreeMap::new();
        for name in &self.files {
            outputs.insert(name.clone(), sha256_hex(&fs::read(self.root.join(name))?));
        }
        self.manifest.outputs = outputs;
        self.manifest.finished = Some(now());
        self.manifest.status = RunStatus::Complete;
        self.write_manifest()?;
        fs::remove_file(self.root.join(LOCK_FILE))?;
        self.done = true;
        Ok(self.manifest.clone())
    }
}

impl Drop for OutputDir {
    /// A run that did not finish leaves nothing behind.
    fn drop(&mut self) {
        if self.done {
            return;
        }
        for name in &self.files {
            let _ = fs::remove_file(self.root.join(name));
        }
        let _ = fs::remove_file(self.root.join(MANIFEST_FILE));
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
        if self.created_root {
            let _ = fs::remove_dir(&self.root);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> RunManifest {
        let mut cfg = FlatConfig::new();
        cfg.insert("data.seed".into(), Value::from(7));
        cfg.insert("data.n".into(), Value::from(3));
        RunManifest::new("gen-data", &[], cfg, BTreeMap::new(), BTreeMap::new())
    }

    #[test]
    fn manifest_precedes_outputs_and_records_hashes() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("run");
        let mut out = OutputDir::create(&root, manifest()).unwrap();
        let m = RunManifest::load(&root.join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.status, RunStatus::Running);
        assert_eq!(m.seeds.len(), 1);
        fs::write(out.file("a.txt"), b"abc").unwrap();
        let m = out.finish().unwrap();
        assert_eq!(
            m.outputs["a.txt"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(!root.join(LOCK_FILE).exists());
        assert_eq!(RunManifest::load(&root.join(MANIFEST_FILE)).unwrap(), m);
    }

    #[test]
    fn abandoned_runs_are_removed() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("run");
        {
            let mut out = OutputDir::create(&root, manifest()).unwrap();
            fs::write(out.file("partial.jsonl"), b"x").unwrap();
        }
        assert!(!root.exists());
    }

    #[test]
    fn non_empty_or_locked_directories_are_refused() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("keep.txt"), b"x").unwrap();
        assert!(matches!(OutputDir::create(tmp.path(), manifest()), Err(CliError::Precondition(_))));
        assert!(tmp.path().join("keep.txt").exists());
        assert!(!tmp.path().join(LOCK_FILE).exists());

        let root = tmp.path().join("busy");
        let _held = OutputDir::create(&root, manifest()).unwrap();
        let err = OutputDir::create(&root, manifest()).err().unwrap();
        assert!(err.to_string().contains("locked"));
    }

    #[test]
    fn directory_hash_ignores_timestamps_and_lock() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("a"), b"1").unwrap();
        let mut m = manifest();
        fs::write(tmp.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        let h = hash_input(tmp.path()).unwrap();
        m.started = "later".into();
        fs::write(tmp.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        fs::write(tmp.path().join(LOCK_FILE), b"").unwrap();
        assert_eq!(hash_input(tmp.path()).unwrap(), h);
        m.config.insert("data.n".into(), Value::from(4));
        fs::write(tmp.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        assert_ne!(hash_input(tmp.path()).unwrap(), h);
        fs::write(tmp.path().join("a"), b"2").unwrap();
        assert_ne!(hash_input(tmp.path()).unwrap(), h);
    }
}
