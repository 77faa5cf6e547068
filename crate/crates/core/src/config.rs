//! Experiment configuration: one TOML document holding every module config
//! plus grids, seeds and split ratios.
//!
//! Each pipeline stage only depends on a subset of sections. Stage hashes
//! cover exactly that subset, so editing sampler settings does not
//! invalidate expert datasets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::channel::PhysicalConfig;
use crate::diffusion::{SamplerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::expert::ExpertConfig;
use crate::gnn::DenoiserConfig;
use crate::train::TrainConfig;

/// Random deployments per density level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkGridConfig {
    pub n_pairs: usize,
    /// One density level per side length; density = N / (side / 1000)².
    pub side_lengths_m: Vec<f64>,
    pub networks_per_density: usize,
}

impl Default for NetworkGridConfig {
    fn default() -> Self {
        // The full-scale sides scaled by sqrt(20 / 400) keep the densities.
        Self {
            n_pairs: 20,
            side_lengths_m: vec![1297.0, 1744.0],
            networks_per_density: 7,
        }
    }
}

impl NetworkGridConfig {
    pub fn densities_per_km2(&self) -> Vec<f64> {
        self.side_lengths_m
            .iter()
            .map(|s| self.n_pairs as f64 / (s / 1000.0).powi(2))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// f_min levels of the QoS sweep; levels in `f_min_grid` count as trained.
    pub qos_grid: Vec<f64>,
    /// Network sizes of the size-transfer sweep, at the configured densities.
    pub sizes: Vec<usize>,
    pub networks_per_size: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            qos_grid: vec![0.4, 0.5, 0.6, 0.7, 0.8],
            sizes: vec![10, 20, 40],
            networks_per_size: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub physical: PhysicalConfig,
    pub networks: NetworkGridConfig,
    pub f_min_grid: Vec<f64>,
    /// Train / validation / test proportions, applied per density level.
    pub split_ratios: [usize; 3],
    pub expert: ExpertConfig,
    pub architecture: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub n_samples: usize,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            physical: PhysicalConfig::default(),
            networks: NetworkGridConfig::default(),
            f_min_grid: vec![0.6],
            split_ratios: [5, 1, 2],
            // A larger dual step than the library default: N=20 networks reach
            // a stationary window in a few thousand iterations instead of
            // running into the cap.
            expert: ExpertConfig {
                eta: 0.05,
                ..ExpertConfig::default()
            },
            architecture: DenoiserConfig::desk(),
            schedule: ScheduleConfig::default(),
            // Within the 500-epoch cap the library rate of 1e-4 underfits.
            train: TrainConfig {
                lr: 1e-3,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig::default(),
            n_samples: 100,
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Pipeline stages, in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Networks,
    Expert,
    Train,
    Sample,
    Evaluate,
    Sweep,
}

impl Stage {
    /// Top-level config keys this stage's outputs depend on, upstream included.
    pub fn sections(self) -> &'static [&'static str] {
        const ALL: [&str; 14] = [
            "seed",
            "physical",
            "networks",
            "expert",
            "f_min_grid",
            "split_ratios",
            "architecture",
            "schedule",
            "train",
            "sampler",
            "n_samples",
            "eval",
            "sweep",
            "",
        ];
        match self {
            Stage::Networks => &ALL[..3],
            Stage::Expert => &ALL[..5],
            Stage::Train => &ALL[..9],
            Stage::Sample => &ALL[..11],
            Stage::Evaluate => &ALL[..12],
            Stage::Sweep => &ALL[..13],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key.path=value` overrides. Values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        let cfg: Self = root.try_into().map_err(|e| Error::Config(e.to_string()))?;
        // Unknown keys deserialize silently; they vanish on the way back.
        let back = toml::Value::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let key = o.as_ref().split_once('=').map_or("", |(k, _)| k.trim());
            if key.split('.').try_fold(&back, |node, part| node.get(part)).is_none() {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.physical.validate()?;
        self.expert.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.networks.n_pairs == 0 || self.networks.networks_per_density == 0 {
            return bad("networks.n_pairs and networks.networks_per_density must be positive");
        }
        if self.networks.side_lengths_m.is_empty() || self.networks.side_lengths_m.iter().any(|s| !(*s > 0.0)) {
            return bad("networks.side_lengths_m must be a nonempty list of positive lengths");
        }
        if self.f_min_grid.is_empty() || self.f_min_grid.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
            return bad("f_min_grid must be a nonempty list of nonnegative levels");
        }
        if self.split_ratios.iter().sum::<usize>() == 0 || self.split_ratios[0] == 0 {
            return bad("split_ratios needs a positive training share");
        }
        if self.n_samples == 0 || self.eval.t_slots == 0 {
            return bad("n_samples and eval.t_slots must be positive");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// The sections `stage` depends on, as a JSON object.
    pub fn stage_view(&self, stage: Stage) -> Value {
        let full = self.to_json();
        let mut out = serde_json::Map::new();
        for key in stage.sections() {
            if let Some(v) = full.get(*key) {
                out.insert(key.to_string(), v.clone());
            }
        }
        Value::Object(out)
    }

    pub fn stage_hash(&self, stage: Stage) -> String {
        hash_json(&self.stage_view(stage))
    }

    pub fn full_hash(&self) -> String {
        hash_json(&self.to_json())
    }
}

/// SHA-256 of the compact JSON encoding. Struct fields serialize in
/// declaration order, so equal configs hash equally.
pub fn hash_json(v: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json encodes")))
}

/// Leaf-level differences between two JSON documents, one line each.
pub fn json_diff(old: &Value, new: &Value) -> Vec<String> {
    let mut out = Vec::new();
    diff_into("", old, new, &mut out);
    out
}

fn diff_into(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(p), Some(q)) => diff_into(&path, p, q, out),
                    (Some(p), None) => out.push(format!("{path}: {p} -> (absent)")),
                    (None, Some(q)) => out.push(format!("{path}: (absent) -> {q}")),
                    (None, None) => {}
                }
            }
        }
        _ if a != b => out.push(format!("{prefix}: {a} -> {b}")),
        _ => {}
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}
