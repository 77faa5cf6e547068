//! Rate Jacobian of one fading realization, checked against a central
//! difference.

use diffalloc::channel::{draw_fading, generate_network, PhysicalConfig};
use diffalloc::rates::{rate_gradient, Allocation, RateModel};

fn main() -> diffalloc::error::Result<()> {
    let cfg = PhysicalConfig::default();
    let state = generate_network(4, 300.0, &cfg, 1)?;
    let fading = draw_fading(&state, 0, 3);
    let x = Allocation::new(vec![2.0, 5.0, 8.0, 1.0]);
    let jac = rate_gradient(&x, &fading, &cfg)?;
    let model = RateModel::new(&cfg);
    for i in 0..4 {
        let h = 1e-6 * x.powers_mw[i];
        let (mut up, mut down) = (x.powers_mw.clone(), x.powers_mw.clone());
        up[i] += h;
        down[i] -= h;
        let (ru, rd) = (model.rates(&up, &fading.fast_gain_matrix), model.rates(&down, &fading.fast_gain_matrix));
        let fd: Vec<f64> = ru.iter().zip(&rd).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let show = |v: &[f64]| v.iter().map(|g| format!("{g:+.4e}")).collect::<Vec<_>>().join(" ");
        println!("d r / d x{i}: analytic {}", show(jac.row(i)));
        println!("            numeric  {}", show(&fd));
    }
    Ok(())
}
