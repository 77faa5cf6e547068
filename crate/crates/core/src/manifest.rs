//! Artifact registry of a pipeline workspace.
//!
//! `manifest.json` records, per artifact: its content hash, the command and
//! config that produced it, and when. Configs are stored in full, keyed by
//! hash, so any artifact can be regenerated from the manifest alone.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{json_diff, ExperimentConfig, Stage};
use crate::error::{invalid, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the workspace root, `/`-separated.
    pub path: String,
    pub sha256: String,
    /// Subcommand arguments that produced the file.
    pub command: Vec<String>,
    pub stage: Stage,
    /// Hash of the full config; key into `Manifest::configs`.
    pub config_hash: String,
    /// Hash of the sections the producing stage depends on.
    pub stage_hash: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub command: Vec<String>,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub configs: BTreeMap<String, Value>,
    pub entries: BTreeMap<String, ManifestEntry>,
    /// Commands in first-run order.
    pub commands: Vec<CommandRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut r = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl Manifest {
    pub fn file(root: &Path) -> PathBuf {
        root.join(MANIFEST_FILE)
    }

    /// Empty manifest when the workspace has none yet.
    pub fn load(root: &Path) -> Result<Self> {
        let p = Self::file(root);
        if !p.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    /// Atomic replace via a temporary file.
    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root)?;
        let tmp = root.join(".manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::rename(tmp, Self::file(root))?;
        Ok(())
    }

    pub fn config(&self, hash: &str) -> Result<ExperimentConfig> {
        let v = self
            .configs
            .get(hash)
            .ok_or_else(|| invalid(format!("manifest has no config {hash}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn note_command(&mut self, command: &[String], cfg: &ExperimentConfig) {
        let hash = cfg.full_hash();
        self.configs.entry(hash.clone()).or_insert_with(|| cfg.to_json());
        let rec = CommandRecord {
            command: command.to_vec(),
            config_hash: hash,
        };
        if !self.commands.contains(&rec) {
            self.commands.push(rec);
        }
    }

    /// Registers `rel` (already written) as produced by `command` at `stage`.
    pub fn record(
        &mut self,
        root: &Path,
        rel: &str,
        stage: Stage,
        cfg: &ExperimentConfig,
        command: &[String],
    ) -> Result<()> {
        let hash = cfg.full_hash();
        self.configs.entry(hash.clone()).or_insert_with(|| cfg.to_json());
        let entry = ManifestEntry {
            path: rel.to_string(),
            sha256: sha256_file(&root.join(rel))?,
            command: command.to_vec(),
            stage,
            config_hash: hash,
            stage_hash: cfg.stage_hash(stage),
            seed: cfg.seed,
            timestamp: now(),
        };
        self.entries.insert(rel.to_string(), entry);
        Ok(())
    }

    /// True when `rel` exists, matches its recorded hash, and was produced
    /// under the same stage config. Fresh outputs are not recomputed.
    pub fn is_fresh(&self, root: &Path, rel: &str, cfg: &ExperimentConfig, stage: Stage) -> bool {
        let Some(e) = self.entries.get(rel) else {
            return false;
        };
        e.stage == stage
            && e.stage_hash == cfg.stage_hash(stage)
            && sha256_file(&root.join(rel)).is_ok_and(|h| h == e.sha256)
    }

    /// Checks an input artifact: registered, unchanged on disk, and
    /// produced by a config that agrees with `cfg` on its stage's sections.
    pub fn verify_input(&self, root: &Path, rel: &str, cfg: &ExperimentConfig) -> Result<&ManifestEntry> {
        let e = self
            .entries
            .get(rel)
            .ok_or_else(|| invalid(format!("{rel} is not registered in {MANIFEST_FILE}; run the producing command first")))?;
        let path = root.join(rel);
        if !path.exists() {
            return Err(invalid(format!("{rel} is listed in {MANIFEST_FILE} but missing on disk")));
        }
        let actual = sha256_file(&path)?;
        if actual != e.sha256 {
            return Err(Error::HashMismatch {
                path: rel.to_string(),
                expected: e.sha256.clone(),
                actual,
            });
        }
        if e.stage_hash != cfg.stage_hash(e.stage) {
            let diff = match self.configs.get(&e.config_hash) {
                Some(old) => {
                    let old: ExperimentConfig = serde_json::from_value(old.clone())?;
                    json_diff(&old.stage_view(e.stage), &cfg.stage_view(e.stage))
                }
                None => vec![format!("stage hash {} -> {}", e.stage_hash, cfg.stage_hash(e.stage))],
            };
            return Err(Error::ConfigMismatch {
                path: rel.to_string(),
                diff,
            });
        }
        Ok(e)
    }

    /// Registered artifacts of `stage` under the directory prefix `dir`.
    pub fn paths_under(&self, dir: &str, stage: Stage) -> Vec<String> {
        let prefix = format!("{}/", dir.trim_end_matches('/'));
        self.entries
            .values()
            .filter(|e| e.stage == stage && e.path.starts_with(&prefix))
            .map(|e| e.path.clone())
            .collect()
    }
}
