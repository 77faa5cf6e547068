//! Random network geometries, large-scale gains and block fading.
//!
//! A network is `N` transmitter-receiver pairs dropped uniformly over a
//! square. Each receiver sits in an annulus around its own transmitter.
//! Gains follow log-distance path loss with log-normal shadowing; entry
//! `(i, j)` of the gain matrix is the linear power gain from transmitter
//! `i` to receiver `j`, so the diagonal holds the desired links.
//!
//! Fast fading multiplies every entry by an independent unit-mean
//! exponential per slot (Rayleigh amplitude). Fading is a pure function of
//! `(seed, slot)` and is never persisted.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::rng::{stream_rng, TAG_FADING, TAG_NETWORK};

/// Small-scale fading law applied per slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingModel {
    /// Unit-mean exponential power multiplier.
    #[default]
    Rayleigh,
    /// Multiplier fixed at 1 (zero-variance fading).
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicalConfig {
    pub bandwidth_hz: f64,
    pub noise_psd_dbm_per_hz: f64,
    pub p_max_mw: f64,
    pub slot_duration_ms: f64,
    pub pathloss_exponent: f64,
    pub pathloss_ref_db: f64,
    pub shadowing_sigma_db: f64,
    pub rx_annulus_m: (f64, f64),
    pub fading: FadingModel,
}

impl Default for PhysicalConfig {
    fn default() -> Self {
        Self {
            bandwidth_hz: 4.0e7,
            noise_psd_dbm_per_hz: -174.0,
            p_max_mw: 10.0,
            slot_duration_ms: 50.0,
            pathloss_exponent: 2.2,
            pathloss_ref_db: 40.0,
            shadowing_sigma_db: 7.0,
            rx_annulus_m: (10.0, 100.0),
            fading: FadingModel::Rayleigh,
        }
    }
}

impl PhysicalConfig {
    /// Thermal noise power `W N0` in mW.
    pub fn noise_power_mw(&self) -> f64 {
        self.bandwidth_hz * 10f64.powf(self.noise_psd_dbm_per_hz / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let noise = self.noise_power_mw();
        if !(noise.is_finite() && noise > 0.0) {
            return Err(invalid(format!("noise power {noise} mW is not positive and finite")));
        }
        let positive = [
            ("bandwidth_hz", self.bandwidth_hz),
            ("p_max_mw", self.p_max_mw),
            ("slot_duration_ms", self.slot_duration_ms),
            ("pathloss_exponent", self.pathloss_exponent),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.shadowing_sigma_db >= 0.0 && self.shadowing_sigma_db.is_finite()) {
            return Err(invalid("shadowing_sigma_db must be nonnegative"));
        }
        if !self.pathloss_ref_db.is_finite() {
            return Err(invalid("pathloss_ref_db must be finite"));
        }
        let (lo, hi) = self.rx_annulus_m;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(invalid(format!("degenerate receiver annulus ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// Deterministic part of the gain: `10^(-(PL0 + 10 γ log10 d) / 10)`.
///
/// Distances below 1 m are clamped to the 1 m reference.
pub fn path_gain(distance_m: f64, config: &PhysicalConfig) -> f64 {
    let d = distance_m.max(1.0);
    let loss_db = config.pathloss_ref_db + 10.0 * config.pathloss_exponent * d.log10();
    10f64.powf(-loss_db / 10.0)
}

/// One network instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub n_pairs: usize,
    pub side_length_m: f64,
    pub seed: u64,
    pub config: PhysicalConfig,
    pub tx_positions: Vec<[f64; 2]>,
    pub rx_positions: Vec<[f64; 2]>,
    pub gain_matrix: Matrix,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl NetworkState {
    /// Builds gains for fixed positions. Shadowing draws come from `seed`.
    pub fn from_geometry(
        tx_positions: Vec<[f64; 2]>,
        rx_positions: Vec<[f64; 2]>,
        side_length_m: f64,
        config: PhysicalConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let n = tx_positions.len();
        if n < 2 {
            return Err(invalid(format!("need at least 2 pairs, got {n}")));
        }
        if rx_positions.len() != n {
            return Err(invalid("tx/rx position counts differ"));
        }
        let mut rng = stream_rng(seed, &[TAG_NETWORK, 1]);
        let sigma = config.shadowing_sigma_db;
        let gain_matrix = Matrix::from_fn(n, n, |i, j| {
            let z: f64 = rng.sample(StandardNormal);
            path_gain(dist(tx_positions[i], rx_positions[j]), &config) * 10f64.powf(sigma * z / 10.0)
        });
        let state = Self {
            n_pairs: n,
            side_length_m,
            seed,
            config,
            tx_positions,
            rx_positions,
            gain_matrix,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n = self.n_pairs;
        if n < 2 || self.gain_matrix.rows() != n || self.gain_matrix.cols() != n {
            return Err(invalid("network dimensions are inconsistent"));
        }
        if self.tx_positions.len() != n || self.rx_positions.len() != n {
            return Err(invalid("position arrays do not match n_pairs"));
        }
        if let Some(bad) = self.gain_matrix.data().iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(invalid(format!("gain {bad} is not positive and finite")));
        }
        Ok(())
    }

    /// Pairs per square kilometre.
    pub fn density_per_km2(&self) -> f64 {
        density_per_km2(self.n_pairs, self.side_length_m)
    }

    pub fn direct_gain(&self, j: usize) -> f64 {
        self.gain_matrix.get(j, j)
    }

    /// `Σ_{i≠j} h_ij` for every receiver `j`.
    pub fn incoming_interference(&self) -> Vec<f64> {
        let n = self.n_pairs;
        (0..n)
            .map(|j| (0..n).filter(|&i| i != j).map(|i| self.gain_matrix.get(i, j)).sum())
            .collect()
    }

    /// Node states `(h_jj, Σ_{i≠j} h_ij, f_min)` in raw linear units.
    pub fn node_features(&self, f_min: f64) -> Vec<[f64; 3]> {
        self.incoming_interference()
            .into_iter()
            .enumerate()
            .map(|(j, inter)| [self.direct_gain(j), inter, f_min])
            .collect()
    }
}

pub fn density_per_km2(n_pairs: usize, side_length_m: f64) -> f64 {
    n_pairs as f64 / (side_length_m / 1000.0).powi(2)
}

/// Side length giving `density` pairs per km² for `n_pairs` pairs.
pub fn side_for_density(n_pairs: usize, density_per_km2: f64) -> f64 {
    1000.0 * (n_pairs as f64 / density_per_km2).sqrt()
}

/// Draws a random network. Deterministic given `seed`.
pub fn generate_network(
    n_pairs: usize,
    side_length_m: f64,
    config: &PhysicalConfig,
    seed: u64,
) -> Result<NetworkState> {
    if n_pairs < 2 {
        return Err(invalid(format!("need at least 2 pairs, got {n_pairs}")));
    }
    if !(side_length_m > 0.0 && side_length_m.is_finite()) {
        return Err(invalid(format!("side length must be positive, got {side_length_m}")));
    }
    config.validate()?;
    let (r_min, r_max) = config.rx_annulus_m;
    if 2.0 * r_min >= side_length_m {
        return Err(invalid("receiver annulus does not fit in the deployment square"));
    }
    let mut rng = stream_rng(seed, &[TAG_NETWORK, 0]);
    let mut tx = Vec::with_capacity(n_pairs);
    let mut rx = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let t = [rng.gen::<f64>() * side_length_m, rng.gen::<f64>() * side_length_m];
        // Resample until the receiver lands inside the square; the annulus
        // inner radius is below half the side so this terminates.
        let r = loop {
            let u: f64 = rng.gen();
            let radius = (u * (r_max * r_max - r_min * r_min) + r_min * r_min).sqrt();
            let theta = rng.gen::<f64>() * std::f64::consts::TAU;
            let p = [t[0] + radius * theta.cos(), t[1] + radius * theta.sin()];
            if (0.0..=side_length_m).contains(&p[0]) && (0.0..=side_length_m).contains(&p[1]) {
                break p;
            }
        };
        tx.push(t);
        rx.push(r);
    }
    NetworkState::from_geometry(tx, rx, side_length_m, config.clone(), seed)
}

/// Instantaneous gains for one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct FadingRealization {
    pub fast_gain_matrix: Matrix,
    pub slot_index: u64,
}

impl FadingRealization {
    pub fn n(&self) -> usize {
        self.fast_gain_matrix.rows()
    }
}

/// Fading for `slot_index`, keyed by `(seed, slot_index)` alone.
pub fn draw_fading(state: &NetworkState, slot_index: u64, seed: u64) -> FadingRealization {
    draw_fading_with(state, slot_index, seed, state.config.fading)
}

pub fn draw_fading_with(
    state: &NetworkState,
    slot_index: u64,
    seed: u64,
    model: FadingModel,
) -> FadingRealization {
    let base = &state.gain_matrix;
    let fast_gain_matrix = match model {
        FadingModel::None => base.clone(),
        FadingModel::Rayleigh => {
            let mut rng = stream_rng(seed, &[TAG_FADING, slot_index]);
            let mut m = base.clone();
            for g in m.data_mut() {
                let e: f64 = Exp1.sample(&mut rng);
                // Exp1 can return exactly 0 with vanishing probability.
                *g *= e.max(f64::MIN_POSITIVE);
            }
            m
        }
    };
    FadingRealization {
        fast_gain_matrix,
        slot_index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_shadowing() -> PhysicalConfig {
        PhysicalConfig {
            shadowing_sigma_db: 0.0,
            ..PhysicalConfig::default()
        }
    }

    #[test]
    fn noise_power_matches_hand_value() {
        let n = PhysicalConfig::default().noise_power_mw();
        assert!((n - 1.5924e-10).abs() / 1.5924e-10 < 1e-4);
    }

    #[test]
    fn path_gain_hand_value() {
        // 10^(-(40 + 22 log10 50)/10)
        let g = path_gain(50.0, &no_shadowing());
        assert!((g - 1.8292e-8).abs() / 1.8292e-8 < 1e-3, "{g}");
    }

    #[test]
    fn density_of_400_pairs_on_5800_m_side() {
        let d = density_per_km2(400, 5800.0);
        assert!((d - 11.89).abs() < 0.01, "{d}");
        assert!((side_for_density(400, d) - 5800.0).abs() < 1e-6);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = PhysicalConfig::default();
        let a = generate_network(2, 1000.0, &cfg, 42).unwrap();
        let b = generate_network(2, 1000.0, &cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_network(2, 1000.0, &cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn geometry_invariants_hold() {
        let cfg = no_shadowing();
        let s = generate_network(30, 800.0, &cfg, 5).unwrap();
        for j in 0..30 {
            for p in [s.tx_positions[j], s.rx_positions[j]] {
                assert!((0.0..=800.0).contains(&p[0]) && (0.0..=800.0).contains(&p[1]));
            }
            let d = dist(s.tx_positions[j], s.rx_positions[j]);
            assert!((10.0..=100.0 + 1e-9).contains(&d));
            let want = path_gain(d, &cfg);
            assert!((s.direct_gain(j) - want).abs() / want < 1e-12);
        }
        assert!(s.gain_matrix.data().iter().all(|g| g.is_finite() && *g > 0.0));
    }

    #[test]
    fn three_pair_network_without_shadowing_uses_pure_path_loss() {
        let cfg = no_shadowing();
        let tx = vec![[0.0, 0.0], [200.0, 0.0], [0.0, 200.0]];
        let rx = vec![[50.0, 0.0], [200.0, 50.0], [0.0, 250.0]];
        let s = NetworkState::from_geometry(tx, rx, 300.0, cfg, 0).unwrap();
        for j in 0..3 {
            assert!((s.direct_gain(j) - 1.8292e-8).abs() / 1.8292e-8 < 1e-3);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = PhysicalConfig::default();
        assert!(generate_network(1, 1000.0, &cfg, 0).is_err());
        assert!(generate_network(4, 0.0, &cfg, 0).is_err());
        let bad = PhysicalConfig {
            rx_annulus_m: (50.0, 50.0),
            ..cfg
        };
        assert!(generate_network(4, 1000.0, &bad, 0).is_err());
    }

    #[test]
    fn fading_is_keyed_by_seed_and_slot() {
        let s = generate_network(4, 500.0, &PhysicalConfig::default(), 1).unwrap();
        let a = draw_fading(&s, 7, 99);
        let b = draw_fading(&s, 7, 99);
        assert_eq!(a, b);
        assert_ne!(a, draw_fading(&s, 8, 99));
        // Drawing other slots first does not disturb slot 7.
        let _ = draw_fading(&s, 3, 99);
        assert_eq!(a, draw_fading(&s, 7, 99));
    }

    #[test]
    fn zero_variance_fading_returns_large_scale_gains() {
        let s = generate_network(3, 500.0, &PhysicalConfig::default(), 2).unwrap();
        let f = draw_fading_with(&s, 0, 1, FadingModel::None);
        assert_eq!(f.fast_gain_matrix, s.gain_matrix);
    }

    #[test]
    fn fading_has_unit_mean() {
        let s = generate_network(2, 500.0, &PhysicalConfig::default(), 3).unwrap();
        let m = 100_000;
        let mean = (0..m)
            .map(|t| draw_fading(&s, t, 5).fast_gain_matrix.get(0, 0))
            .sum::<f64>()
            / m as f64;
        let rel = (mean / s.gain_matrix.get(0, 0) - 1.0).abs();
        assert!(rel < 0.01, "relative deviation {rel}");
    }

    #[test]
    fn json_roundtrip() {
        let s = generate_network(3, 400.0, &PhysicalConfig::default(), 9).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["gain_matrix"][2][1].is_number());
        let back: NetworkState = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
    }
}
