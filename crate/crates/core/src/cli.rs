//! Command-line surface of the pipeline. The binary is a thin wrapper around
//! [`main_with_args`], so commands can also be driven (and replayed) from
//! library code.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::pipeline::{EvalSource, Layout, Pipeline, Split, SweepMode};

pub const ENV_WORKERS: &str = "DIFFALLOC_WORKERS";
pub const ENV_SEED: &str = "DIFFALLOC_SEED";
pub const WORKSPACE_CONFIG: &str = "config.toml";

#[derive(Parser, Debug, Clone)]
#[command(
    name = "diffalloc",
    version,
    about = "Primal-dual experts and graph diffusion policies for wireless power control"
)]
pub struct Cli {
    /// Workspace directory holding manifest.json and all artifacts.
    #[arg(short = 'w', long, default_value = ".", global = true)]
    pub workspace: PathBuf,
    /// Experiment config (TOML). Defaults to <workspace>/config.toml when
    /// present, else built-in defaults.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. --set expert.eta=0.02 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Worker threads (also DIFFALLOC_WORKERS).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Full power everywhere.
    Fp,
    /// Conditional-mean powers of the expert.
    Ap,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
            SplitArg::All => Split::All,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Qos,
    Size,
}

#[derive(Args, Debug, Clone, PartialEq)]
#[command(group(ArgGroup::new("source").required(true).args(["samples", "expert", "baseline"])))]
pub struct EvalArgs {
    /// Generated sample sets (directory; default `samples`).
    #[arg(long, num_args = 0..=1, default_missing_value = "samples")]
    pub samples: Option<String>,
    /// Expert datasets (directory; default `expert`).
    #[arg(long, num_args = 0..=1, default_missing_value = "expert")]
    pub expert: Option<String>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Expert directory used by the average-power baseline.
    #[arg(long)]
    pub datasets: Option<String>,
    #[arg(long)]
    pub networks: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Subcommand, Debug, Clone, PartialEq)]
pub enum Command {
    /// Random deployments, one JSON per network, grouped by density.
    GenerateNetworks {
        #[arg(long)]
        out: Option<String>,
    },
    /// Primal-dual expert datasets for every network and f_min level.
    RunExpert {
        #[arg(long)]
        networks: Option<String>,
        /// Comma-separated levels; overrides `f_min_grid`.
        #[arg(long, value_delimiter = ',')]
        f_min_grid: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Trains the denoiser on the training split.
    Train {
        #[arg(long)]
        networks: Option<String>,
        #[arg(long)]
        datasets: Option<String>,
        #[arg(long)]
        out_model: Option<String>,
    },
    /// Draws generated allocations for each network of a split.
    Sample {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        networks: Option<String>,
        /// Samples per network (default `n_samples`).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<String>,
    },
    /// Time-shared ergodic evaluation of a policy.
    Evaluate(EvalArgs),
    /// QoS or size sweep of the trained policy.
    Sweep {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        networks: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Every stage in order with default paths.
    RunAll,
    /// Re-executes the commands recorded in another workspace's manifest,
    /// each under its recorded config.
    Replay {
        #[arg(long)]
        from: PathBuf,
    },
    /// Prints the effective config.
    ShowConfig,
}

fn push_opt(out: &mut Vec<String>, flag: &str, v: &Option<String>) {
    if let Some(v) = v {
        out.push(flag.to_string());
        out.push(v.clone());
    }
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

impl Command {
    /// Canonical argument vector, as recorded in the manifest.
    pub fn to_args(&self) -> Vec<String> {
        let mut a = Vec::new();
        match self {
            Command::GenerateNetworks { out } => {
                a.push("generate-networks".into());
                push_opt(&mut a, "--out", out);
            }
            Command::RunExpert { networks, f_min_grid, out } => {
                a.push("run-expert".into());
                push_opt(&mut a, "--networks", networks);
                if let Some(g) = f_min_grid {
                    a.push("--f-min-grid".into());
                    a.push(g.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
                }
                push_opt(&mut a, "--out", out);
            }
            Command::Train { networks, datasets, out_model } => {
                a.push("train".into());
                push_opt(&mut a, "--networks", networks);
                push_opt(&mut a, "--datasets", datasets);
                push_opt(&mut a, "--out-model", out_model);
            }
            Command::Sample { model, networks, n, split, out } => {
                a.push("sample".into());
                push_opt(&mut a, "--model", model);
                push_opt(&mut a, "--networks", networks);
                push_opt(&mut a, "--n", &n.map(|n| n.to_string()));
                a.push("--split".into());
                a.push(split_name(*split).into());
                push_opt(&mut a, "--out", out);
            }
            Command::Evaluate(e) => {
                a.push("evaluate".into());
                push_opt(&mut a, "--samples", &e.samples);
                push_opt(&mut a, "--expert", &e.expert);
                if let Some(b) = e.baseline {
                    a.push("--baseline".into());
                    a.push(if b == Baseline::Fp { "fp" } else { "ap" }.into());
                }
                push_opt(&mut a, "--datasets", &e.datasets);
                push_opt(&mut a, "--networks", &e.networks);
                a.push("--split".into());
                a.push(split_name(e.split).into());
                push_opt(&mut a, "--out", &e.out);
            }
            Command::Sweep { mode, model, networks, out } => {
                a.push("sweep".into());
                a.push("--mode".into());
                a.push(if *mode == ModeArg::Qos { "qos" } else { "size" }.into());
                push_opt(&mut a, "--model", model);
                push_opt(&mut a, "--networks", networks);
                push_opt(&mut a, "--out", out);
            }
            Command::RunAll => a.push("run-all".into()),
            Command::Replay { from } => {
                a.push("replay".into());
                a.push("--from".into());
                a.push(from.display().to_string());
            }
            Command::ShowConfig => a.push("show-config".into()),
        }
        a
    }

    /// Stage sequence of `run-all`.
    pub fn full_pipeline() -> Vec<Command> {
        let eval = |samples: bool, expert: bool, baseline: Option<Baseline>| {
            Command::Evaluate(EvalArgs {
                samples: samples.then(|| "samples".to_string()),
                expert: expert.then(|| "expert".to_string()),
                baseline,
                datasets: None,
                networks: None,
                split: SplitArg::Test,
                out: None,
            })
        };
        let sweep = |mode| Command::Sweep {
            mode,
            model: None,
            networks: None,
            out: None,
        };
        vec![
            Command::GenerateNetworks { out: None },
            Command::RunExpert {
                networks: None,
                f_min_grid: None,
                out: None,
            },
            Command::Train {
                networks: None,
                datasets: None,
                out_model: None,
            },
            Command::Sample {
                model: None,
                networks: None,
                n: None,
                split: SplitArg::Test,
                out: None,
            },
            eval(false, true, None),
            eval(true, false, None),
            eval(false, false, Some(Baseline::Ap)),
            eval(false, false, Some(Baseline::Fp)),
            sweep(ModeArg::Qos),
            sweep(ModeArg::Size),
        ]
    }
}

/// Config from `--config`, the workspace file, or defaults, then the seed
/// environment variable, then `--set` overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let p = cli.workspace.join(WORKSPACE_CONFIG);
            if p.exists() {
                ExperimentConfig::load(&p)?
            } else {
                ExperimentConfig::default()
            }
        }
    };
    let mut overrides = Vec::new();
    if let Ok(seed) = std::env::var(ENV_SEED) {
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{ENV_SEED} must be an unsigned integer, got `{seed}`")))?;
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend(cli.set.iter().cloned());
    base.with_overrides(&overrides)
}

/// Sizes the global worker pool once per process.
pub fn init_workers(requested: Option<usize>) -> Result<()> {
    let n = match requested {
        Some(n) => Some(n),
        None => match std::env::var(ENV_WORKERS) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{ENV_WORKERS} must be a positive integer, got `{v}`")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("worker count must be positive".into()));
        }
        // A pool built earlier in this process stays in place.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn layout_for(cmd: &Command) -> Layout {
    let mut l = Layout::default();
    let set = |slot: &mut String, v: &Option<String>| {
        if let Some(v) = v {
            *slot = v.clone();
        }
    };
    match cmd {
        Command::GenerateNetworks { out } => set(&mut l.networks, out),
        Command::RunExpert { networks, out, .. } => {
            set(&mut l.networks, networks);
            set(&mut l.expert, out);
        }
        Command::Train {
            networks,
            datasets,
            out_model,
        } => {
            set(&mut l.networks, networks);
            set(&mut l.expert, datasets);
            set(&mut l.model, out_model);
        }
        Command::Sample {
            model, networks, out, ..
        } => {
            set(&mut l.model, model);
            set(&mut l.networks, networks);
            set(&mut l.samples, out);
        }
        Command::Evaluate(e) => {
            set(&mut l.samples, &e.samples);
            set(&mut l.expert, &e.expert);
            set(&mut l.expert, &e.datasets);
            set(&mut l.networks, &e.networks);
            set(&mut l.reports, &e.out);
        }
        Command::Sweep {
            model, networks, out, ..
        } => {
            set(&mut l.model, model);
            set(&mut l.networks, networks);
            set(&mut l.sweeps, out);
        }
        Command::RunAll | Command::Replay { .. } | Command::ShowConfig => {}
    }
    l
}

/// Runs one stage command against `workspace` under `config` and returns
/// its summary lines; lines starting with `warning:` belong on stderr.
pub fn execute(workspace: &Path, config: &ExperimentConfig, cmd: &Command) -> Result<Vec<String>> {
    let mut config = config.clone();
    if let Command::RunExpert {
        f_min_grid: Some(g), ..
    } = cmd
    {
        config.f_min_grid = g.clone();
        config.validate()?;
    }
    match cmd {
        Command::RunAll => {
            let mut lines = Vec::new();
            for c in Command::full_pipeline() {
                lines.extend(execute(workspace, &config, &c)?);
            }
            return Ok(lines);
        }
        Command::Replay { from } => return replay(from, workspace),
        Command::ShowConfig => return Ok(vec![config.to_toml_string()?.trim_end().to_string()]),
        _ => {}
    }
    let name = cmd.to_args()[0].clone();
    let mut out = Vec::new();
    let mut p = Pipeline::open(workspace, config, layout_for(cmd), cmd.to_args())?;
    match cmd {
        Command::GenerateNetworks { .. } => {
            let r = p.generate_networks()?;
            out.push(format!("{name}: {} written, {} up to date", r.written, r.skipped));
        }
        Command::RunExpert { .. } => {
            let r = p.run_expert()?;
            out.push(format!("{name}: {} datasets written, {} up to date", r.written, r.skipped));
            out.extend(r.warnings.iter().map(|w| format!("warning: {w}")));
            if !r.warnings.is_empty() {
                out.push(format!("{name}: {} infeasibility warning(s)", r.warnings.len()));
            }
        }
        Command::Train { .. } => {
            let r = p.train()?;
            out.push(format!("{name}: {}", if r.written > 0 { "model written" } else { "model up to date" }));
        }
        Command::Sample { n, split, .. } => {
            let r = p.sample((*split).into(), *n)?;
            out.push(format!("{name}: {} sample sets written, {} up to date", r.written, r.skipped));
        }
        Command::Evaluate(e) => {
            let source = match (&e.samples, &e.expert, e.baseline) {
                (Some(_), _, _) => EvalSource::Generated,
                (_, Some(_), _) => EvalSource::Expert,
                (_, _, Some(Baseline::Ap)) => EvalSource::AveragePower,
                _ => EvalSource::FullPower,
            };
            let rows = p.evaluate(source, e.split.into())?;
            for r in rows.iter().filter(|r| r.network_id == "pooled") {
                out.push(format!(
                    "{name}: {} f_min={} p1={:.4} p5={:.4} mean={:.4} feasible={:.3}",
                    r.policy, r.f_min, r.p1, r.p5, r.mean, r.feasible_fraction
                ));
            }
        }
        Command::Sweep { mode, .. } => {
            let mode = if *mode == ModeArg::Qos { SweepMode::Qos } else { SweepMode::Size };
            let rows = p.sweep(mode)?;
            for r in rows.iter().filter(|r| r.network_id == "pooled") {
                out.push(format!(
                    "{name}: x={} density={:.2} p5={:.4} mean={:.4} trained={}",
                    r.x, r.density, r.p5, r.mean, r.trained
                ));
            }
        }
        Command::RunAll | Command::Replay { .. } | Command::ShowConfig => unreachable!(),
    }
    Ok(out)
}

/// Re-runs every command recorded in `source`'s manifest inside `dest`.
pub fn replay(source: &Path, dest: &Path) -> Result<Vec<String>> {
    let m = Manifest::load(source)?;
    if m.commands.is_empty() {
        return Err(Error::InvalidInput(format!("{} records no commands", source.display())));
    }
    let mut lines = Vec::new();
    for rec in &m.commands {
        let cfg = m.config(&rec.config_hash)?;
        let argv = std::iter::once("diffalloc".to_string()).chain(rec.command.iter().cloned());
        let cli = Cli::try_parse_from(argv).map_err(|e| Error::InvalidInput(e.to_string()))?;
        lines.extend(execute(dest, &cfg, &cli.command)?);
    }
    Ok(lines)
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let run = || -> Result<Vec<String>> {
        init_workers(cli.workers)?;
        let cfg = resolve_config(&cli)?;
        execute(&cli.workspace, &cfg, &cli.command)
    };
    match run() {
        Ok(lines) => {
            for l in lines {
                if l.starts_with("warning:") {
                    eprintln!("{l}");
                } else {
                    println!("{l}");
                }
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
