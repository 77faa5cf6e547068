//! Stage implementations behind the command-line driver.
//!
//! A workspace is a directory holding `manifest.json` and one subdirectory
//! per stage. Every stage reads its inputs through the manifest (existence,
//! content hash, producing config), computes in parallel over independent
//! tasks, then writes and registers outputs from a single thread. Outputs
//! already registered under the same stage config are left untouched.

use std::collections::BTreeMap;
use std::io::BufWriter;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{generate_network, NetworkState};
use crate::config::{ExperimentConfig, Stage};
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{invalid, Error, Result};
use crate::eval::{
    pool_reports, stratified_split, time_share, write_sweep_csv, EvalConfig, EvalReport, EvalSummary, PolicySpec,
    SweepRow,
};
use crate::expert::{read_sample_set, run_expert, sidecar_path, write_sample_set, ExpertDataset, SampleSetKind};
use crate::gnn::{DenoiserModel, EdgeNormalization, FeatureStats};
use crate::manifest::Manifest;
use crate::policy::{model_sidecar_path, TrainedPolicy};
use crate::rng::{derive_seed, key_of, TAG_EXPERT, TAG_INIT, TAG_NETWORK, TAG_POLICY, TAG_SAMPLE, TAG_TRAIN};
use crate::train::{train_denoiser, write_loss_csv, ElementSet};

/// Stage directories, relative to the workspace root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub networks: String,
    pub expert: String,
    pub model: String,
    pub samples: String,
    pub reports: String,
    pub sweeps: String,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            networks: "networks".into(),
            expert: "expert".into(),
            model: "model/model.ugnn".into(),
            samples: "samples".into(),
            reports: "reports".into(),
            sweeps: "sweeps".into(),
        }
    }
}

/// Which networks a stage runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(invalid(format!("unknown split `{s}` (train, val, test, all)"))),
        }
    }
}

/// Policy evaluated by `evaluate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSource {
    Expert,
    Generated,
    AveragePower,
    FullPower,
}

impl EvalSource {
    pub fn label(self) -> &'static str {
        match self {
            EvalSource::Expert => "expert",
            EvalSource::Generated => "generated",
            EvalSource::AveragePower => "average_power",
            EvalSource::FullPower => "full_power",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    Qos,
    Size,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub id: String,
    pub density_index: usize,
    pub density_per_km2: f64,
    pub path: String,
}

/// `index.json` of the networks directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkIndex {
    pub networks: Vec<NetworkEntry>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl NetworkIndex {
    pub fn ids(&self, split: Split) -> Vec<String> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
            Split::All => self.networks.iter().map(|n| n.id.clone()).collect(),
        }
    }

    pub fn entry(&self, id: &str) -> Result<&NetworkEntry> {
        self.networks
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| invalid(format!("unknown network {id}")))
    }
}

/// Counts of one stage run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub written: usize,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

pub fn network_id(density_index: usize, k: usize) -> String {
    format!("d{density_index}-n{k:02}")
}

/// File-name tag of a QoS level.
pub fn f_min_tag(f_min: f64) -> String {
    format!("f{f_min:.3}")
}

/// Sampling key of a (network, level) pair.
fn sample_key(id: &str, f_min: f64) -> String {
    format!("{id}_{}", f_min_tag(f_min))
}

fn rel_join(dir: &str, name: &str) -> String {
    format!("{}/{name}", dir.trim_end_matches('/'))
}

fn with_ext(rel: &str, ext: &str) -> String {
    Path::new(rel).with_extension(ext).to_string_lossy().replace('\\', "/")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<std::fs::File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Evaluation config with seeds tied to the master seed.
fn eval_config(cfg: &ExperimentConfig) -> EvalConfig {
    EvalConfig {
        fading_seed: derive_seed(cfg.seed, &[TAG_POLICY, 0, cfg.eval.fading_seed]),
        policy_seed: derive_seed(cfg.seed, &[TAG_POLICY, 1, cfg.eval.policy_seed]),
        ..cfg.eval
    }
}

fn sampler_config(cfg: &ExperimentConfig) -> SamplerConfig {
    SamplerConfig {
        seed: derive_seed(cfg.seed, &[TAG_SAMPLE, cfg.sampler.seed]),
        ..cfg.sampler
    }
}

fn check_tags(grid: &[f64]) -> Result<()> {
    let mut tags: Vec<String> = grid.iter().map(|f| f_min_tag(*f)).collect();
    tags.sort();
    let before = tags.len();
    tags.dedup();
    if tags.len() != before {
        return Err(invalid("f_min levels must differ in the first three decimals"));
    }
    Ok(())
}

pub struct Pipeline {
    pub root: PathBuf,
    pub config: ExperimentConfig,
    pub layout: Layout,
    manifest: Manifest,
    command: Vec<String>,
}

impl Pipeline {
    /// Opens the workspace at `root` for one command invocation.
    pub fn open(root: &Path, config: ExperimentConfig, layout: Layout, command: Vec<String>) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(root)?;
        let mut manifest = Manifest::load(root)?;
        manifest.note_command(&command, &config);
        manifest.save(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            config,
            layout,
            manifest,
            command,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn abs(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn fresh(&self, rels: &[&str], stage: Stage) -> bool {
        rels.iter().all(|r| self.manifest.is_fresh(&self.root, r, &self.config, stage))
    }

    fn record(&mut self, rels: &[&str], stage: Stage) -> Result<()> {
        for r in rels {
            self.manifest.record(&self.root, r, stage, &self.config, &self.command)?;
        }
        self.manifest.save(&self.root)
    }

    fn verify(&self, rel: &str) -> Result<PathBuf> {
        self.manifest.verify_input(&self.root, rel, &self.config)?;
        Ok(self.abs(rel))
    }

    fn index_rel(&self) -> String {
        rel_join(&self.layout.networks, "index.json")
    }

    pub fn network_index(&self) -> Result<NetworkIndex> {
        let p = self.verify(&self.index_rel())?;
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    pub fn load_network(&self, index: &NetworkIndex, id: &str) -> Result<NetworkState> {
        let p = self.verify(&index.entry(id)?.path)?;
        let state: NetworkState = serde_json::from_str(&std::fs::read_to_string(p)?)?;
        state.validate()?;
        Ok(state)
    }

    pub fn expert_rel(&self, id: &str, f_min: f64) -> String {
        rel_join(&self.layout.expert, &format!("{}.expd", sample_key(id, f_min)))
    }

    pub fn samples_rel(&self, id: &str, f_min: f64) -> String {
        rel_join(&self.layout.samples, &format!("{}.gend", sample_key(id, f_min)))
    }

    fn load_sample_set(&self, rel: &str) -> Result<ExpertDataset> {
        self.verify(&with_ext(rel, "json"))?;
        Ok(read_sample_set(&self.verify(rel)?)?.1)
    }

    /// One JSON file per network, grouped by density level, plus the split
    /// index.
    pub fn generate_networks(&mut self) -> Result<StageReport> {
        let cfg = self.config.clone();
        let grid = &cfg.networks;
        let densities = grid.densities_per_km2();
        let mut entries = Vec::new();
        let mut tasks = Vec::new();
        for (di, side) in grid.side_lengths_m.iter().enumerate() {
            for k in 0..grid.networks_per_density {
                let id = network_id(di, k);
                let rel = rel_join(&self.layout.networks, &format!("density_{di}/{id}.json"));
                entries.push(NetworkEntry {
                    id,
                    density_index: di,
                    density_per_km2: densities[di],
                    path: rel.clone(),
                });
                tasks.push((di, k, *side, rel));
            }
        }
        let mut report = StageReport::default();
        let todo: Vec<_> = tasks.into_iter().filter(|t| !self.fresh(&[&t.3], Stage::Networks)).collect();
        report.skipped = entries.len() - todo.len();
        let built: Vec<(String, NetworkState)> = todo
            .par_iter()
            .map(|(di, k, side, rel)| {
                let seed = derive_seed(cfg.seed, &[TAG_NETWORK, *di as u64, *k as u64]);
                Ok((rel.clone(), generate_network(grid.n_pairs, *side, &cfg.physical, seed)?))
            })
            .collect::<Result<_>>()?;
        for (rel, state) in &built {
            write_text(&self.abs(rel), &(serde_json::to_string_pretty(state)? + "\n"))?;
            self.record(&[rel], Stage::Networks)?;
            report.written += 1;
        }

        let groups: Vec<Vec<usize>> = (0..grid.side_lengths_m.len())
            .map(|di| (0..entries.len()).filter(|&i| entries[i].density_index == di).collect())
            .collect();
        let [train, val, test] = stratified_split(&groups, cfg.split_ratios, cfg.seed);
        let ids = |v: &[usize]| v.iter().map(|&i| entries[i].id.clone()).collect::<Vec<_>>();
        let index = NetworkIndex {
            train: ids(&train),
            val: ids(&val),
            test: ids(&test),
            networks: entries,
        };
        let rel = self.index_rel();
        if !self.fresh(&[&rel], Stage::Networks) {
            write_text(&self.abs(&rel), &(serde_json::to_string_pretty(&index)? + "\n"))?;
            self.record(&[&rel], Stage::Networks)?;
            report.written += 1;
        } else {
            report.skipped += 1;
        }
        Ok(report)
    }

    /// One expert dataset and diagnostics CSV per (network, f_min level).
    pub fn run_expert(&mut self) -> Result<StageReport> {
        let cfg = self.config.clone();
        check_tags(&cfg.f_min_grid)?;
        let index = self.network_index()?;
        let mut report = StageReport::default();
        let mut todo = Vec::new();
        for net in &index.networks {
            for &f in &cfg.f_min_grid {
                let bin = self.expert_rel(&net.id, f);
                let (side, diag) = (with_ext(&bin, "json"), with_ext(&bin, "diag.csv"));
                if self.fresh(&[&bin, &side, &diag], Stage::Expert) {
                    report.skipped += 1;
                } else {
                    todo.push((net.id.clone(), f, self.load_network(&index, &net.id)?, bin, side, diag));
                }
            }
        }
        let runs: Vec<_> = todo
            .par_iter()
            .map(|(id, f, state, ..)| {
                let seed = derive_seed(cfg.seed, &[TAG_EXPERT, key_of(id), f.to_bits()]);
                run_expert(state, id, *f, &cfg.expert, seed)
            })
            .collect::<Result<_>>()?;
        for ((id, f, _, bin, side, diag), run) in todo.iter().zip(runs) {
            if run.diagnostics.infeasible_warning {
                report
                    .warnings
                    .push(format!("{id} at f_min {f}: constraints look unattainable"));
            }
            if let Some(dir) = self.abs(bin).parent() {
                std::fs::create_dir_all(dir)?;
            }
            write_sample_set(&self.abs(bin), SampleSetKind::Expert, &run.dataset)?;
            write_with(&self.abs(diag), |w| run.diagnostics.write_csv(w))?;
            self.record(&[bin, side, diag], Stage::Expert)?;
            report.written += 1;
        }
        Ok(report)
    }

    fn datasets(&self, index: &NetworkIndex, split: Split) -> Result<Vec<(ExpertDataset, NetworkState)>> {
        let mut out = Vec::new();
        for id in index.ids(split) {
            let state = self.load_network(index, &id)?;
            for &f in &self.config.f_min_grid {
                out.push((self.load_sample_set(&self.expert_rel(&id, f))?, state.clone()));
            }
        }
        Ok(out)
    }

    /// Trains the denoiser on the training split, early-stopping on the
    /// validation split. Writes the checkpoint, its sidecar and a loss CSV.
    pub fn train(&mut self) -> Result<StageReport> {
        let cfg = self.config.clone();
        let model_rel = self.layout.model.clone();
        let side_rel = with_ext(&model_rel, "json");
        let loss_rel = with_ext(&model_rel, "loss.csv");
        if self.fresh(&[&model_rel, &side_rel, &loss_rel], Stage::Train) {
            return Ok(StageReport {
                skipped: 1,
                ..StageReport::default()
            });
        }
        let index = self.network_index()?;
        let train = self.datasets(&index, Split::Train)?;
        let val = self.datasets(&index, Split::Val)?;
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let mut seen = BTreeMap::new();
        for (d, s) in &train {
            seen.entry(d.network_id.clone()).or_insert(s);
        }
        let norm = EdgeNormalization::fit(seen.values().copied())?;
        let feats: Vec<[f64; 3]> = train.iter().flat_map(|(d, _)| d.node_features.iter().copied()).collect();
        let stats = FeatureStats::fit(&feats)?;
        let depth = cfg.architecture.depth;
        fn pairs(v: &[(ExpertDataset, NetworkState)]) -> Vec<(&ExpertDataset, &NetworkState)> {
            v.iter().map(|(d, s)| (d, s)).collect()
        }
        let train_set = ElementSet::build(&pairs(&train), &norm, &stats, depth)?;
        let val_set = ElementSet::build(&pairs(&val), &norm, &stats, depth)?;
        let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
        let mut model = DenoiserModel::<f32>::init(cfg.architecture.clone(), derive_seed(cfg.seed, &[TAG_INIT]))?;
        let tcfg = crate::train::TrainConfig {
            seed: derive_seed(cfg.seed, &[TAG_TRAIN, cfg.train.seed]),
            ..cfg.train.clone()
        };
        let outcome = train_denoiser(&mut model, &train_set, &val_set, &schedule, &tcfg)?;
        let best = DenoiserModel::from_params(cfg.architecture.clone(), outcome.best)?;
        let policy = TrainedPolicy::new(best, norm, stats, cfg.schedule)?;
        if let Some(dir) = self.abs(&model_rel).parent() {
            std::fs::create_dir_all(dir)?;
        }
        policy.save(&self.abs(&model_rel))?;
        debug_assert_eq!(model_sidecar_path(&self.abs(&model_rel)), self.abs(&side_rel));
        write_with(&self.abs(&loss_rel), |w| write_loss_csv(w, &outcome.log))?;
        log::info!(
            "best validation epoch {} of {}",
            outcome.best_epoch,
            outcome.log.len()
        );
        self.record(&[&model_rel, &side_rel, &loss_rel], Stage::Train)?;
        Ok(StageReport {
            written: 1,
            ..StageReport::default()
        })
    }

    pub fn load_policy(&self) -> Result<TrainedPolicy> {
        let rel = self.layout.model.clone();
        self.verify(&with_ext(&rel, "json"))?;
        TrainedPolicy::load(&self.verify(&rel)?)
    }

    /// `n` generated allocations per (network, level) of `split`.
    pub fn sample(&mut self, split: Split, n: Option<usize>) -> Result<StageReport> {
        let cfg = self.config.clone();
        check_tags(&cfg.f_min_grid)?;
        let n = n.unwrap_or(cfg.n_samples);
        if n == 0 {
            return Err(invalid("sample count must be positive"));
        }
        let index = self.network_index()?;
        let mut report = StageReport::default();
        let mut todo = Vec::new();
        for id in index.ids(split) {
            for &f in &cfg.f_min_grid {
                let bin = self.samples_rel(&id, f);
                let side = with_ext(&bin, "json");
                if self.fresh(&[&bin, &side], Stage::Sample) {
                    report.skipped += 1;
                } else {
                    todo.push((id.clone(), f, self.load_network(&index, &id)?, bin, side));
                }
            }
        }
        if todo.is_empty() {
            return Ok(report);
        }
        let policy = self.load_policy()?;
        let sampler = sampler_config(&cfg);
        let sets: Vec<ExpertDataset> = todo
            .par_iter()
            .map(|(id, f, state, ..)| {
                let samples = policy.sample(state, &sample_key(id, *f), *f, n, &sampler)?;
                Ok(ExpertDataset {
                    network_id: id.clone(),
                    node_features: state.node_features(*f),
                    samples,
                    f_min: *f,
                    burn_in: 0,
                    step_size: 0.0,
                })
            })
            .collect::<Result<_>>()?;
        for ((.., bin, side), set) in todo.iter().zip(sets) {
            if let Some(dir) = self.abs(bin).parent() {
                std::fs::create_dir_all(dir)?;
            }
            write_sample_set(&self.abs(bin), SampleSetKind::Generated, &set)?;
            debug_assert_eq!(sidecar_path(&self.abs(bin)), self.abs(side));
            self.record(&[bin, side], Stage::Sample)?;
            report.written += 1;
        }
        Ok(report)
    }

    fn policy_for(&self, source: EvalSource, id: &str, f: f64) -> Result<PolicySpec> {
        Ok(match source {
            EvalSource::Expert => PolicySpec::ExpertWindow(self.load_sample_set(&self.expert_rel(id, f))?.samples),
            EvalSource::Generated => {
                PolicySpec::GeneratedSamples(self.load_sample_set(&self.samples_rel(id, f))?.samples)
            }
            EvalSource::AveragePower => {
                PolicySpec::average_power(&self.load_sample_set(&self.expert_rel(id, f))?.samples)?
            }
            EvalSource::FullPower => PolicySpec::FullPower,
        })
    }

    /// Time-shares `source` on every (network, level) of `split`. Writes a
    /// percentile trajectory CSV and JSON summary per pair, pooled
    /// trajectories per level, and a summary table.
    pub fn evaluate(&mut self, source: EvalSource, split: Split) -> Result<Vec<EvalSummary>> {
        let cfg = self.config.clone();
        check_tags(&cfg.f_min_grid)?;
        let index = self.network_index()?;
        let ecfg = eval_config(&cfg);
        let dir = rel_join(&self.layout.reports, source.label());
        let mut tasks = Vec::new();
        for &f in &cfg.f_min_grid {
            for id in index.ids(split) {
                tasks.push((id.clone(), f, self.load_network(&index, &id)?, self.policy_for(source, &id, f)?));
            }
        }
        if tasks.is_empty() {
            return Err(Error::Empty("evaluation split"));
        }
        let reports: Vec<EvalReport> = tasks
            .par_iter()
            .map(|(id, f, state, policy)| time_share(policy, state, id, *f, &ecfg))
            .collect::<Result<_>>()?;
        let mut summaries = Vec::new();
        let mut outputs = Vec::new();
        for r in &reports {
            let base = rel_join(&dir, &sample_key(&r.network_id, r.f_min));
            outputs.push((format!("{base}.csv"), r.clone()));
        }
        for &f in &cfg.f_min_grid {
            let group: Vec<EvalReport> = reports.iter().filter(|r| r.f_min == f).cloned().collect();
            let pooled = pool_reports(&group, "pooled")?;
            outputs.push((rel_join(&dir, &format!("pooled_{}.csv", f_min_tag(f))), pooled));
        }
        let mut rels = Vec::new();
        for (csv, r) in &outputs {
            write_with(&self.abs(csv), |w| r.write_csv(w))?;
            let json = with_ext(csv, "json");
            write_text(&self.abs(&json), &(serde_json::to_string_pretty(&r.summary())? + "\n"))?;
            summaries.push(r.summary());
            rels.push(csv.clone());
            rels.push(json);
        }
        let table = rel_join(&dir, "summary.csv");
        write_with(&self.abs(&table), |w| write_summary_csv(w, &summaries))?;
        rels.push(table);
        let refs: Vec<&str> = rels.iter().map(String::as_str).collect();
        self.record(&refs, Stage::Evaluate)?;
        Ok(summaries)
    }

    /// QoS sweep over `sweep.qos_grid` on the test split, or size sweep on
    /// fresh networks at the configured densities.
    pub fn sweep(&mut self, mode: SweepMode) -> Result<Vec<SweepRow>> {
        let cfg = self.config.clone();
        let policy = self.load_policy()?;
        let sampler = sampler_config(&cfg);
        let ecfg = eval_config(&cfg);
        let densities = cfg.networks.densities_per_km2();
        // (x, density, trained, id, f_min, state)
        let mut tasks: Vec<(f64, f64, bool, String, f64, NetworkState)> = Vec::new();
        let (name, x_name) = match mode {
            SweepMode::Qos => {
                let index = self.network_index()?;
                for &f in &cfg.sweep.qos_grid {
                    let trained = cfg.f_min_grid.iter().any(|g| (g - f).abs() < 1e-9);
                    for id in index.ids(Split::Test) {
                        let e = index.entry(&id)?;
                        tasks.push((f, e.density_per_km2, trained, id.clone(), f, self.load_network(&index, &id)?));
                    }
                }
                ("qos", "f_min")
            }
            SweepMode::Size => {
                let f = cfg.f_min_grid[0];
                let n0 = cfg.networks.n_pairs as f64;
                for &size in &cfg.sweep.sizes {
                    for (di, side) in cfg.networks.side_lengths_m.iter().enumerate() {
                        let side = side * (size as f64 / n0).sqrt();
                        for k in 0..cfg.sweep.networks_per_size {
                            let seed = derive_seed(cfg.seed, &[TAG_NETWORK, 1 << 32 | size as u64, di as u64, k as u64]);
                            let state = generate_network(size, side, &cfg.physical, seed)?;
                            let id = format!("size{size}-d{di}-n{k:02}");
                            tasks.push((size as f64, densities[di], size == cfg.networks.n_pairs, id, f, state));
                        }
                    }
                }
                ("size", "n_pairs")
            }
        };
        if tasks.is_empty() {
            return Err(Error::Empty("sweep grid"));
        }
        let reports: Vec<EvalReport> = tasks
            .par_iter()
            .map(|(_, _, _, id, f, state)| {
                let key = sample_key(id, *f);
                let samples = policy.sample(state, &key, *f, cfg.n_samples, &sampler)?;
                time_share(&PolicySpec::GeneratedSamples(samples), state, &key, *f, &ecfg)
            })
            .collect::<Result<_>>()?;
        let mut rows: Vec<SweepRow> = tasks
            .iter()
            .zip(&reports)
            .map(|((x, d, trained, ..), r)| SweepRow::from_report(*x, *d, *trained, r))
            .collect();
        // Pooled rows per (x, density).
        let mut keys: Vec<(f64, f64, bool)> = tasks.iter().map(|t| (t.0, t.1, t.2)).collect();
        keys.dedup();
        for (x, d, trained) in keys {
            let group: Vec<EvalReport> = tasks
                .iter()
                .zip(&reports)
                .filter(|(t, _)| t.0 == x && t.1 == d)
                .map(|(_, r)| r.clone())
                .collect();
            rows.push(SweepRow::from_report(x, d, trained, &pool_reports(&group, "pooled")?));
        }
        let rel = rel_join(&self.layout.sweeps, &format!("{name}.csv"));
        write_with(&self.abs(&rel), |w| write_sweep_csv(w, x_name, &rows))?;
        self.record(&[&rel], Stage::Sweep)?;
        Ok(rows)
    }
}

pub fn write_summary_csv(w: &mut impl Write, rows: &[EvalSummary]) -> Result<()> {
    writeln!(w, "network,policy,f_min,t_slots,p1,p5,p10,mean,feasible_fraction")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.network_id, r.policy, r.f_min, r.t_slots, r.p1, r.p5, r.p10, r.mean, r.feasible_fraction
        )?;
    }
    Ok(())
}
