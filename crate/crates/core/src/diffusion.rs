//! Noise schedule, forward corruption, the noise-prediction loss and the
//! DDIM reverse sampler.
//!
//! Allocations live in `[0, p_max]` but the diffusion signal lives in
//! `[-1, 1]`: `s = 2x/p_max - 1`. The sampler is written against
//! [`NoisePredictor`] so analytic denoisers can stand in for the network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use diffalloc_tensor::Scalar;

use crate::error::{invalid, Error, Result};
use crate::gnn::{DenoiserModel, GraphBatch, GraphOperator};
use crate::rates::Allocation;
use crate::rng::{stream_rng, TAG_SAMPLE};

/// Linear-β schedule. Index 0 is the clean signal (`ᾱ_0 = 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!("betas must satisfy 0 < {beta_start} <= {beta_end} < 1")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let t = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + t * (beta_end - beta_start)
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::linear(c.steps, c.beta_start, c.beta_end)
    }

    /// Number of noising steps `K`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `ᾱ_k` for `0 ≤ k ≤ K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.len() {
            return Err(invalid(format!("diffusion step {k} outside 1..={}", self.len())));
        }
        Ok(())
    }
}

/// `√ᾱ_k x0 + √(1-ᾱ_k) ε`.
pub fn forward_noise(x0: &[f64], k: usize, schedule: &NoiseSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(k)?;
    if x0.len() != eps.len() {
        return Err(Error::DimensionMismatch {
            op: "forward_noise",
            expected: x0.len(),
            got: eps.len(),
        });
    }
    Ok(noise_with(x0, schedule.alpha_bar(k), eps))
}

/// Forward corruption at an explicit `ᾱ`.
pub fn noise_with(x0: &[f64], alpha_bar: f64, eps: &[f64]) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

pub fn to_signal(x: &Allocation, p_max: f64) -> Vec<f64> {
    x.powers_mw.iter().map(|p| 2.0 * p / p_max - 1.0).collect()
}

/// Inverse of [`to_signal`] followed by projection onto `[0, p_max]`.
pub fn from_signal(s: &[f64], p_max: f64) -> Allocation {
    Allocation::new(s.iter().map(|v| ((v + 1.0) * 0.5 * p_max).clamp(0.0, p_max)).collect())
}

/// Draws `k ~ U{1..K}` and `ε ~ N(0, I)` of length `n`.
pub fn draw_step_and_noise(rng: &mut ChaCha8Rng, schedule: &NoiseSchedule, n: usize) -> (usize, Vec<f64>) {
    let k = rng.gen_range(1..=schedule.len());
    let eps = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    (k, eps)
}

/// Predicts the noise in a stack of corrupted signals.
pub trait NoisePredictor {
    /// Row-block sizes of the stacked elements.
    fn block_sizes(&self) -> Vec<usize>;

    /// `x_k` concatenates one block per element; `steps[e]` is its step.
    fn predict(&self, x_k: &[f64], steps: &[usize]) -> Result<Vec<f64>>;
}

/// Mean squared noise-prediction error on one draw of `(k, ε)` per element.
pub fn training_loss(
    predictor: &impl NoisePredictor,
    x0: &[f64],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let sizes = predictor.block_sizes();
    if sizes.is_empty() {
        return Err(Error::Empty("training_loss"));
    }
    let total: usize = sizes.iter().sum();
    if x0.len() != total {
        return Err(Error::DimensionMismatch {
            op: "training_loss",
            expected: total,
            got: x0.len(),
        });
    }
    let mut steps = Vec::with_capacity(sizes.len());
    let mut eps = Vec::with_capacity(total);
    let mut x_k = Vec::with_capacity(total);
    let mut off = 0;
    for (e, &n) in sizes.iter().enumerate() {
        let mut rng = stream_rng(seed, &[e as u64]);
        let (k, noise) = draw_step_and_noise(&mut rng, schedule, n);
        x_k.extend(noise_with(&x0[off..off + n], schedule.alpha_bar(k), &noise));
        eps.extend(noise);
        steps.push(k);
        off += n;
    }
    let pred = predictor.predict(&x_k, &steps)?;
    Ok(pred.iter().zip(&eps).map(|(p, e)| (p - e).powi(2)).sum::<f64>() / total as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_k = 0`; randomness only from `x_K`.
    #[default]
    Deterministic,
    /// The variance of the ancestral sampler at the same step pair.
    DdpmMatched,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub num_ddim_steps: usize,
    pub sigma_mode: SigmaMode,
    /// Clip `x̂0` to `[-1, 1]` at every step.
    pub clip_denoised: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_ddim_steps: 100,
            sigma_mode: SigmaMode::Deterministic,
            clip_denoised: true,
            seed: 0,
        }
    }
}

/// Evenly spaced, strictly increasing steps from 1 to `K` inclusive.
pub fn ddim_timesteps(k: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > k {
        return Err(invalid(format!("num_ddim_steps {s} must lie in 1..={k}")));
    }
    if s == 1 {
        return Ok(vec![k]);
    }
    Ok((0..s)
        .map(|i| (1.0 + i as f64 * (k - 1) as f64 / (s - 1) as f64).round() as usize)
        .collect())
}

/// Runs DDIM chains in lockstep, one per entry of `chain_keys`.
///
/// Chain `c` draws its initial noise and any `σ` noise from a stream keyed
/// by `chain_keys[c]`, so results do not depend on how chains are grouped.
/// Returns the final clean signals, stacked.
pub fn ddim_sample(
    predictor: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    chain_keys: &[[u64; 2]],
) -> Result<Vec<f64>> {
    let sizes = predictor.block_sizes();
    if sizes.len() != chain_keys.len() {
        return Err(Error::DimensionMismatch {
            op: "ddim_sample chains",
            expected: sizes.len(),
            got: chain_keys.len(),
        });
    }
    let taus = ddim_timesteps(schedule.len(), sampler.num_ddim_steps)?;
    let mut rngs: Vec<ChaCha8Rng> = chain_keys
        .iter()
        .map(|k| stream_rng(sampler.seed, &[TAG_SAMPLE, k[0], k[1]]))
        .collect();
    let mut x: Vec<f64> = Vec::with_capacity(sizes.iter().sum());
    for (rng, &n) in rngs.iter_mut().zip(&sizes) {
        x.extend((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    for i in (0..taus.len()).rev() {
        let k = taus[i];
        let prev = if i == 0 { 0 } else { taus[i - 1] };
        let (ab, ab_prev) = (schedule.alpha_bar(k), schedule.alpha_bar(prev));
        let steps = vec![k; sizes.len()];
        let eps = predictor.predict(&x, &steps)?;
        if eps.len() != x.len() || eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "ddim_sample noise prediction".into(),
                step: k,
            });
        }
        let sigma = match sampler.sigma_mode {
            SigmaMode::Deterministic => 0.0,
            SigmaMode::DdpmMatched => ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt(),
        };
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut off = 0;
        for (rng, &n) in rngs.iter_mut().zip(&sizes) {
            for r in off..off + n {
                let mut x0 = (x[r] - (1.0 - ab).sqrt() * eps[r]) / ab.sqrt();
                let mut e = eps[r];
                if sampler.clip_denoised && !(-1.0..=1.0).contains(&x0) {
                    x0 = x0.clamp(-1.0, 1.0);
                    e = (x[r] - ab.sqrt() * x0) / (1.0 - ab).sqrt();
                }
                let z = if sigma > 0.0 { rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                x[r] = ab_prev.sqrt() * x0 + dir * e + sigma * z;
            }
            off += n;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "ddim_sample iterate".into(),
                step: k,
            });
        }
    }
    Ok(x)
}

/// A denoiser bound to a fixed stack of copies of one graph.
pub struct ModelPredictor<'a, T> {
    model: &'a DenoiserModel<T>,
    batch: GraphBatch<T>,
    u: Vec<[f64; 3]>,
    n: usize,
}

impl<'a, T: Scalar> ModelPredictor<'a, T> {
    /// `u` holds normalized features for one copy of the graph.
    pub fn new(model: &'a DenoiserModel<T>, op: &GraphOperator, u: &[[f64; 3]], copies: usize) -> Result<Self> {
        if u.len() != op.n() {
            return Err(Error::DimensionMismatch {
                op: "ModelPredictor features",
                expected: op.n(),
                got: u.len(),
            });
        }
        let ops = vec![op; copies];
        Ok(Self {
            model,
            batch: GraphBatch::new(&ops)?,
            u: u.repeat(copies),
            n: op.n(),
        })
    }
}

impl<T: Scalar> NoisePredictor for ModelPredictor<'_, T> {
    fn block_sizes(&self) -> Vec<usize> {
        vec![self.n; self.batch.n_graphs]
    }

    fn predict(&self, x_k: &[f64], steps: &[usize]) -> Result<Vec<f64>> {
        self.model.denoise_batch(x_k, steps, &self.batch, &self.u)
    }
}

/// Draws `n_samples` allocations for one network, `chunk` chains at a time.
/// Sample `s` is keyed by `(network_key, s)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_allocations<T: Scalar>(
    model: &DenoiserModel<T>,
    op: &GraphOperator,
    u: &[[f64; 3]],
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    network_key: u64,
    n_samples: usize,
    p_max: f64,
    chunk: usize,
) -> Result<Vec<Allocation>> {
    let chunk = chunk.max(1);
    let mut out = Vec::with_capacity(n_samples);
    let mut start = 0;
    while start < n_samples {
        let len = chunk.min(n_samples - start);
        let pred = ModelPredictor::new(model, op, u, len)?;
        let keys: Vec<[u64; 2]> = (start..start + len).map(|s| [network_key, s as u64]).collect();
        let x = ddim_sample(&pred, schedule, sampler, &keys)?;
        out.extend(x.chunks(op.n()).map(|s| from_signal(s, p_max)));
        start += len;
    }
    Ok(out)
}
