//! Time-sharing evaluation of allocation policies.
//!
//! A stochastic policy is executed by drawing one allocation per slot from
//! its sample set; deterministic baselines repeat a fixed vector. Every
//! policy on a network sees the same fading sequence, so comparisons share
//! their channel noise.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{draw_fading, NetworkState};
use crate::error::{invalid, Error, Result};
use crate::rates::{Allocation, RateModel};
use crate::rng::{stream_rng, TAG_POLICY, TAG_SPLIT};

/// Lower order statistic: element `ceil(p/100 · n) - 1` of the sorted input.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(invalid(format!("percentile {p} outside (0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[order_index(v.len(), p)])
}

fn order_index(n: usize, p: f64) -> usize {
    ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n) - 1
}

#[derive(Clone, Debug, PartialEq)]
pub enum PolicySpec {
    ExpertWindow(Vec<Allocation>),
    GeneratedSamples(Vec<Allocation>),
    AveragePower(Allocation),
    FullPower,
}

impl PolicySpec {
    /// Conditional-mean powers of a sample set.
    pub fn average_power(samples: &[Allocation]) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("average_power"))?;
        let mut acc = vec![0.0; first.len()];
        for s in samples {
            for (a, p) in acc.iter_mut().zip(&s.powers_mw) {
                *a += p;
            }
        }
        let m = samples.len() as f64;
        Ok(PolicySpec::AveragePower(Allocation::new(acc.into_iter().map(|a| a / m).collect())))
    }

    pub fn label(&self) -> &'static str {
        match self {
            PolicySpec::ExpertWindow(_) => "expert",
            PolicySpec::GeneratedSamples(_) => "generated",
            PolicySpec::AveragePower(_) => "average_power",
            PolicySpec::FullPower => "full_power",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeShareRule {
    /// Uniform draw with replacement each slot.
    #[default]
    Uniform,
    RoundRobin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub t_slots: usize,
    pub rule: TimeShareRule,
    /// Seed of the shared fading sequence.
    pub fading_seed: u64,
    /// Seed of the per-slot policy draws.
    pub policy_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            t_slots: 100,
            rule: TimeShareRule::Uniform,
            fading_seed: 1,
            policy_seed: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub slot: usize,
    pub p1: f64,
    pub p5: f64,
    pub p10: f64,
    pub mean: f64,
}

impl PercentileRow {
    fn of(slot: usize, rates: &[f64]) -> Self {
        let mut v = rates.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Self {
            slot,
            p1: v[order_index(n, 1.0)],
            p5: v[order_index(n, 5.0)],
            p10: v[order_index(n, 10.0)],
            mean: v.iter().sum::<f64>() / n as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub network_id: String,
    pub policy: String,
    pub f_min: f64,
    pub t_slots: usize,
    /// Cumulative-mean rate vector after each slot.
    pub cumulative_rates: Vec<Vec<f64>>,
    pub trajectory: Vec<PercentileRow>,
    pub feasible_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub network_id: String,
    pub policy: String,
    pub f_min: f64,
    pub t_slots: usize,
    pub p1: f64,
    pub p5: f64,
    pub p10: f64,
    pub mean: f64,
    pub feasible_fraction: f64,
}

impl EvalReport {
    fn from_cumulative(network_id: String, policy: String, f_min: f64, cumulative_rates: Vec<Vec<f64>>) -> Self {
        let trajectory = cumulative_rates
            .iter()
            .enumerate()
            .map(|(t, r)| PercentileRow::of(t + 1, r))
            .collect();
        let last = cumulative_rates.last().cloned().unwrap_or_default();
        let feasible = last.iter().filter(|r| **r >= f_min).count() as f64 / last.len().max(1) as f64;
        Self {
            network_id,
            policy,
            f_min,
            t_slots: cumulative_rates.len(),
            cumulative_rates,
            trajectory,
            feasible_fraction: feasible,
        }
    }

    pub fn final_rates(&self) -> &[f64] {
        self.cumulative_rates.last().map_or(&[], Vec::as_slice)
    }

    pub fn final_row(&self) -> PercentileRow {
        *self.trajectory.last().expect("report has at least one slot")
    }

    pub fn summary(&self) -> EvalSummary {
        let r = self.final_row();
        EvalSummary {
            network_id: self.network_id.clone(),
            policy: self.policy.clone(),
            f_min: self.f_min,
            t_slots: self.t_slots,
            p1: r.p1,
            p5: r.p5,
            p10: r.p10,
            mean: r.mean,
            feasible_fraction: self.feasible_fraction,
        }
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "slot,p1,p5,p10,mean")?;
        for r in &self.trajectory {
            writeln!(w, "{},{},{},{},{}", r.slot, r.p1, r.p5, r.p10, r.mean)?;
        }
        Ok(())
    }
}

/// Receivers of several same-horizon reports treated as one population.
pub fn pool_reports(reports: &[EvalReport], network_id: &str) -> Result<EvalReport> {
    let first = reports.first().ok_or(Error::Empty("pool_reports"))?;
    let t = first.t_slots;
    if reports.iter().any(|r| r.t_slots != t || r.policy != first.policy) {
        return Err(invalid("pooled reports need one policy and one horizon"));
    }
    let cumulative = (0..t)
        .map(|s| reports.iter().flat_map(|r| r.cumulative_rates[s].iter().copied()).collect())
        .collect();
    Ok(EvalReport::from_cumulative(
        network_id.to_string(),
        first.policy.clone(),
        first.f_min,
        cumulative,
    ))
}

/// Executes `policy` for `config.t_slots` slots on `state`.
pub fn time_share(
    policy: &PolicySpec,
    state: &NetworkState,
    network_id: &str,
    f_min: f64,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if config.t_slots == 0 {
        return Err(invalid("evaluation horizon must be at least one slot"));
    }
    let n = state.n_pairs;
    let p_max = state.config.p_max_mw;
    let full = Allocation::constant(n, p_max);
    let samples: &[Allocation] = match policy {
        PolicySpec::ExpertWindow(s) | PolicySpec::GeneratedSamples(s) => {
            if s.is_empty() {
                return Err(Error::Empty("policy sample set"));
            }
            s
        }
        PolicySpec::AveragePower(a) => std::slice::from_ref(a),
        PolicySpec::FullPower => std::slice::from_ref(&full),
    };
    if let Some(bad) = samples.iter().find(|s| s.len() != n) {
        return Err(Error::DimensionMismatch {
            op: "time_share",
            expected: n,
            got: bad.len(),
        });
    }
    let model = RateModel::new(&state.config);
    let mut rng = stream_rng(config.policy_seed, &[TAG_POLICY, crate::rng::key_of(network_id)]);
    let mut sum = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let mut cumulative = Vec::with_capacity(config.t_slots);
    for t in 0..config.t_slots {
        let x = match config.rule {
            TimeShareRule::Uniform => &samples[rng.gen_range(0..samples.len())],
            TimeShareRule::RoundRobin => &samples[t % samples.len()],
        };
        let fading = draw_fading(state, t as u64, config.fading_seed);
        model.rates_into(&x.powers_mw, &fading.fast_gain_matrix, &mut buf);
        for (s, r) in sum.iter_mut().zip(&buf) {
            *s += r;
        }
        let m = (t + 1) as f64;
        cumulative.push(sum.iter().map(|s| s / m).collect());
    }
    Ok(EvalReport::from_cumulative(
        network_id.to_string(),
        policy.label().to_string(),
        f_min,
        cumulative,
    ))
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `f_min` for QoS sweeps, `N` for size sweeps.
    pub x: f64,
    pub density: f64,
    pub policy: String,
    pub p1: f64,
    pub p5: f64,
    pub p10: f64,
    pub mean: f64,
    pub feasible_fraction: f64,
    pub network_id: String,
    /// Whether `x` was a training level.
    pub trained: bool,
}

impl SweepRow {
    pub fn from_report(x: f64, density: f64, trained: bool, report: &EvalReport) -> Self {
        let r = report.final_row();
        Self {
            x,
            density,
            policy: report.policy.clone(),
            p1: r.p1,
            p5: r.p5,
            p10: r.p10,
            mean: r.mean,
            feasible_fraction: report.feasible_fraction,
            network_id: report.network_id.clone(),
            trained,
        }
    }
}

pub fn write_sweep_csv(w: &mut impl Write, x_name: &str, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{x_name},density,policy,p1,p5,p10,mean,feasible_fraction,network,trained")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.x, r.density, r.policy, r.p1, r.p5, r.p10, r.mean, r.feasible_fraction, r.network_id, r.trained
        )?;
    }
    Ok(())
}

/// Train/validation/test counts for `n` items under integer `ratios`.
pub fn split_counts(n: usize, ratios: [usize; 3]) -> (usize, usize, usize) {
    let total: usize = ratios.iter().sum::<usize>().max(1);
    let train = ((n * ratios[0]) as f64 / total as f64).round() as usize;
    let val = (((n * ratios[1]) as f64 / total as f64).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    (train, val, n - train - val)
}

/// Seeded split applied independently inside each group (density level).
pub fn stratified_split(groups: &[Vec<usize>], ratios: [usize; 3], seed: u64) -> [Vec<usize>; 3] {
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (g, members) in groups.iter().enumerate() {
        let mut m = members.clone();
        let mut rng = stream_rng(seed, &[TAG_SPLIT, g as u64]);
        rand::seq::SliceRandom::shuffle(m.as_mut_slice(), &mut rng);
        let (a, b, _) = split_counts(m.len(), ratios);
        out[0].extend_from_slice(&m[..a]);
        out[1].extend_from_slice(&m[a..a + b]);
        out[2].extend_from_slice(&m[a + b..]);
    }
    for part in &mut out {
        part.sort_unstable();
    }
    out
}
