//! Per-receiver rates under interference, their ergodic averages and the
//! closed-form Jacobian with respect to transmit powers.
//!
//! All arithmetic is linear (mW, linear gains) in f64. Rates are spectral
//! efficiencies in bits/s/Hz.

use serde::{Deserialize, Serialize};

use crate::channel::{FadingRealization, PhysicalConfig};
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

/// Transmit powers in mW, one per pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub powers_mw: Vec<f64>,
}

impl Allocation {
    pub fn new(powers_mw: Vec<f64>) -> Self {
        Self { powers_mw }
    }

    pub fn constant(n: usize, p: f64) -> Self {
        Self::new(vec![p; n])
    }

    pub fn len(&self) -> usize {
        self.powers_mw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers_mw.is_empty()
    }

    /// Componentwise projection onto `[0, p_max]`. NaN maps to 0.
    pub fn project(&mut self, p_max: f64) {
        for p in &mut self.powers_mw {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, p_max) };
        }
    }

    pub fn in_box(&self, p_max: f64) -> bool {
        self.powers_mw.iter().all(|p| (0.0..=p_max).contains(p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateVector {
    pub rates_bps_hz: Vec<f64>,
}

impl RateVector {
    pub fn len(&self) -> usize {
        self.rates_bps_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates_bps_hz.is_empty()
    }
}

/// Rate kernel with the noise power computed once.
#[derive(Clone, Copy, Debug)]
pub struct RateModel {
    pub noise_mw: f64,
}

impl RateModel {
    pub fn new(config: &PhysicalConfig) -> Self {
        Self {
            noise_mw: config.noise_power_mw(),
        }
    }

    /// Interference-plus-noise `I_j` at every receiver.
    /// Noise plus received interference at every receiver.
    pub fn interference(&self, x: &[f64], h: &Matrix) -> Vec<f64> {
        let n = x.len();
        let mut total = vec![self.noise_mw; n];
        for i in 0..n {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for (j, t) in total.iter_mut().enumerate() {
                if j != i {
                    *t += xi * h.get(i, j);
                }
            }
        }
        total
    }

    /// Unchecked kernel; `out` receives `r_j`.
    pub fn rates_into(&self, x: &[f64], h: &Matrix, out: &mut [f64]) {
        let inter = self.interference(x, h);
        for j in 0..x.len() {
            out[j] = (x[j] * h.get(j, j) / inter[j]).ln_1p() / std::f64::consts::LN_2;
        }
    }

    pub fn rates(&self, x: &[f64], h: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.rates_into(x, h, &mut out);
        out
    }

    /// Jacobian with entry `(i, j) = ∂r_j/∂x_i`.
    pub fn jacobian(&self, x: &[f64], h: &Matrix) -> Matrix {
        let n = x.len();
        let inter = self.interference(x, h);
        let inv_ln2 = 1.0 / std::f64::consts::LN_2;
        Matrix::from_fn(n, n, |i, j| {
            let s = x[j] * h.get(j, j);
            let total = inter[j] + s;
            if i == j {
                inv_ln2 * h.get(j, j) / total
            } else {
                -inv_ln2 * s * h.get(i, j) / (inter[j] * total)
            }
        })
    }

    /// `Jᵀ`-free contraction: `g_i = Σ_j w_j ∂r_j/∂x_i`, in O(N²).
    pub fn weighted_gradient(&self, x: &[f64], h: &Matrix, w: &[f64]) -> Vec<f64> {
        let n = x.len();
        let inter = self.interference(x, h);
        let inv_ln2 = 1.0 / std::f64::consts::LN_2;
        // c_j multiplies h_ij in every off-diagonal term of column j.
        let c: Vec<f64> = (0..n)
            .map(|j| {
                let s = x[j] * h.get(j, j);
                w[j] * s / (inter[j] * (inter[j] + s))
            })
            .collect();
        (0..n)
            .map(|i| {
                let own = w[i] * h.get(i, i) / (inter[i] + x[i] * h.get(i, i));
                let cross: f64 = (0..n).filter(|&j| j != i).map(|j| c[j] * h.get(i, j)).sum();
                inv_ln2 * (own - cross)
            })
            .collect()
    }
}

fn check_alloc(x: &Allocation, fading: &FadingRealization) -> Result<()> {
    if x.len() != fading.n() {
        return Err(Error::DimensionMismatch {
            op: "rates",
            expected: fading.n(),
            got: x.len(),
        });
    }
    if let Some(p) = x.powers_mw.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(invalid(format!("power {p} mW is negative or non-finite")));
    }
    Ok(())
}

pub fn instantaneous_rates(
    x: &Allocation,
    fading: &FadingRealization,
    config: &PhysicalConfig,
) -> Result<RateVector> {
    check_alloc(x, fading)?;
    Ok(RateVector {
        rates_bps_hz: RateModel::new(config).rates(&x.powers_mw, &fading.fast_gain_matrix),
    })
}

/// Componentwise mean of per-slot rates.
pub fn ergodic_rates(
    x_sequence: &[Allocation],
    fading_sequence: &[FadingRealization],
    config: &PhysicalConfig,
) -> Result<RateVector> {
    if x_sequence.is_empty() {
        return Err(Error::Empty("ergodic_rates"));
    }
    if x_sequence.len() != fading_sequence.len() {
        return Err(Error::DimensionMismatch {
            op: "ergodic_rates",
            expected: x_sequence.len(),
            got: fading_sequence.len(),
        });
    }
    let model = RateModel::new(config);
    let n = x_sequence[0].len();
    let mut acc = vec![0.0; n];
    let mut buf = vec![0.0; n];
    for (x, f) in x_sequence.iter().zip(fading_sequence) {
        check_alloc(x, f)?;
        model.rates_into(&x.powers_mw, &f.fast_gain_matrix, &mut buf);
        for (a, r) in acc.iter_mut().zip(&buf) {
            *a += r;
        }
    }
    let t = x_sequence.len() as f64;
    Ok(RateVector {
        rates_bps_hz: acc.into_iter().map(|a| a / t).collect(),
    })
}

/// Sum-rate utility and slack vector `r - f_min`.
pub fn utility_and_constraints(r: &RateVector, f_min: f64) -> (f64, Vec<f64>) {
    let utility = r.rates_bps_hz.iter().sum();
    let constraints = r.rates_bps_hz.iter().map(|v| v - f_min).collect();
    (utility, constraints)
}

/// Entry `(i, j)` is `∂r_j/∂x_i`.
pub fn rate_gradient(
    x: &Allocation,
    fading: &FadingRealization,
    config: &PhysicalConfig,
) -> Result<Matrix> {
    check_alloc(x, fading)?;
    Ok(RateModel::new(config).jacobian(&x.powers_mw, &fading.fast_gain_matrix))
}
