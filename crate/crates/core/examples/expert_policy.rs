//! Runs the primal-dual expert on a small network and reports per-node
//! window-averaged rates against the minimum-rate target.

use diffalloc::channel::{draw_fading, generate_network, side_for_density, PhysicalConfig};
use diffalloc::config::ExperimentConfig;
use diffalloc::expert::run_expert;
use diffalloc::rates::RateModel;

fn main() -> diffalloc::error::Result<()> {
    let n = 8;
    let state = generate_network(n, side_for_density(n, 11.9), &PhysicalConfig::default(), 5)?;
    let cfg = ExperimentConfig::default().expert;
    let f_min = 0.6;
    let run = run_expert(&state, "demo", f_min, &cfg, 9)?;
    let d = &run.diagnostics;
    println!("burn-in {} iterations, window {}, warning {}", d.burn_in, d.window, d.infeasible_warning);
    println!("final multipliers {:.3?}", d.final_multipliers);

    let model = RateModel::new(&state.config);
    let mut acc = vec![0.0; n];
    let draws = 50;
    for (t, x) in run.dataset.samples.iter().enumerate() {
        for k in 0..draws {
            let f = draw_fading(&state, (t * draws + k) as u64, 11);
            model.rates(&x.powers_mw, &f.fast_gain_matrix).iter().zip(&mut acc).for_each(|(r, a)| *a += r);
        }
    }
    let total = (run.dataset.samples.len() * draws) as f64;
    for (j, a) in acc.iter().enumerate() {
        println!("node {j}: {:.3} bits/s/Hz (target {f_min})", a / total);
    }
    Ok(())
}
