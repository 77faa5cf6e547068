//! Drops a random interference network and estimates ergodic rates under
//! Rayleigh fading for full power and for a single active link.

use diffalloc::channel::{draw_fading, generate_network, side_for_density, PhysicalConfig};
use diffalloc::rates::{ergodic_rates, Allocation};

fn main() -> diffalloc::error::Result<()> {
    let n = 10;
    let cfg = PhysicalConfig::default();
    let state = generate_network(n, side_for_density(n, 8.0), &cfg, 42)?;
    println!("{n} pairs on a {:.0} m square, {:.1} pairs/km2", state.side_length_m, state.density_per_km2());

    let slots = 2000;
    let fading: Vec<_> = (0..slots).map(|t| draw_fading(&state, t, 7)).collect();
    let full = vec![Allocation::constant(n, cfg.p_max_mw); slots as usize];
    let r = ergodic_rates(&full, &fading, &cfg)?;
    println!("full power rates: {:.3?}", r.rates_bps_hz);

    let mut solo = vec![0.0; n];
    solo[0] = cfg.p_max_mw;
    let r = ergodic_rates(&vec![Allocation::new(solo); slots as usize], &fading, &cfg)?;
    println!("link 0 alone: {:.3} bits/s/Hz", r.rates_bps_hz[0]);
    Ok(())
}
