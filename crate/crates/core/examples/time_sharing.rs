//! Time-shares an expert window and the two baselines over a common fading
//! sequence and prints the tail of the ergodic-rate distribution.

use diffalloc::channel::{generate_network, side_for_density, PhysicalConfig};
use diffalloc::config::ExperimentConfig;
use diffalloc::eval::{time_share, EvalConfig, PolicySpec, TimeShareRule};
use diffalloc::expert::run_expert;

fn main() -> diffalloc::error::Result<()> {
    let n = 10;
    let state = generate_network(n, side_for_density(n, 11.9), &PhysicalConfig::default(), 8)?;
    let f_min = 0.6;
    let run = run_expert(&state, "ts", f_min, &ExperimentConfig::default().expert, 1)?;
    let eval = EvalConfig {
        t_slots: 1000,
        rule: TimeShareRule::RoundRobin,
        ..EvalConfig::default()
    };
    let policies = [
        PolicySpec::ExpertWindow(run.dataset.samples.clone()),
        PolicySpec::average_power(&run.dataset.samples)?,
        PolicySpec::FullPower,
    ];
    for p in &policies {
        let row = time_share(p, &state, "ts", f_min, &eval)?.final_row();
        println!("{:>14}: p1 {:.3} p5 {:.3} p10 {:.3} mean {:.3}", p.label(), row.p1, row.p5, row.p10, row.mean);
    }
    Ok(())
}
