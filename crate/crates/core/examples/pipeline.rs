//! Runs every pipeline stage on a miniature configuration in a scratch
//! workspace, then replays it from the manifest.

use diffalloc::cli::{execute, replay, Command};
use diffalloc::config::ExperimentConfig;

fn main() -> diffalloc::error::Result<()> {
    let cfg = ExperimentConfig::default().with_overrides(&[
        "networks.n_pairs=6",
        "networks.networks_per_density=8",
        "expert.n_dual_iters=1500",
        "expert.min_burn_in=500",
        "expert.window=40",
        "train.max_epochs=5",
        "n_samples=20",
        "sweep.qos_grid=[0.4, 0.6]",
        "sweep.sizes=[6, 8]",
        "sweep.networks_per_size=1",
        "architecture.channels=8",
        "architecture.time_embed_dim=8",
        "architecture.cond_embed_dim=8",
        "architecture.depth=2",
    ])?;
    let dir = tempfile::tempdir()?;
    for line in execute(dir.path(), &cfg, &Command::RunAll)? {
        println!("{line}");
    }
    let again = tempfile::tempdir()?;
    let lines = replay(dir.path(), again.path())?;
    println!("replayed {} summary lines into {}", lines.len(), again.path().display());
    Ok(())
}
