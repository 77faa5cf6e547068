//! Primal-dual expert for the ergodic sum-rate problem with per-receiver
//! minimum-rate constraints.
//!
//! Each dual iteration approximately maximizes the Lagrangian over the power
//! box with a few projected stochastic-gradient steps, then moves the
//! multipliers against the constraint slack. Once the multipliers hover
//! around their optimum, the primal iterates keep switching between
//! operating points; the final window of iterates is the expert's sample
//! set and time-sharing over it realizes the constrained optimum.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use diffalloc_tensor::{AdamW, AdamWConfig, Csr, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::channel::{draw_fading, FadingRealization, NetworkState, PhysicalConfig};
use crate::error::{invalid, Error, Result};
use crate::gnn::{build_operator, EdgeNormalization, FeatureStats, PrimalGnn};
use crate::rates::{ergodic_rates, utility_and_constraints, Allocation, RateModel};
use crate::rng::{derive_seed, TAG_EXPERT, TAG_PRIMAL_INIT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub multipliers: Vec<f64>,
    pub iteration: usize,
}

impl DualState {
    pub fn zeros(n: usize) -> Self {
        Self {
            multipliers: vec![0.0; n],
            iteration: 0,
        }
    }
}

/// `λ' = max(λ - η f, 0)`.
pub fn dual_update(lambda: &DualState, constraint_slack: &[f64], eta: f64) -> Result<DualState> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(invalid(format!("dual step size must be positive, got {eta}")));
    }
    if constraint_slack.len() != lambda.multipliers.len() {
        return Err(Error::DimensionMismatch {
            op: "dual_update",
            expected: lambda.multipliers.len(),
            got: constraint_slack.len(),
        });
    }
    Ok(DualState {
        multipliers: lambda
            .multipliers
            .iter()
            .zip(constraint_slack)
            .map(|(l, f)| (l - eta * f).max(0.0))
            .collect(),
        iteration: lambda.iteration + 1,
    })
}

/// Utility plus `λᵀ f` on batch-mean rates.
pub fn lagrangian(
    x: &Allocation,
    lambda: &DualState,
    batch: &[FadingRealization],
    f_min: f64,
    config: &PhysicalConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("lagrangian batch"));
    }
    let xs = vec![x.clone(); batch.len()];
    let r = ergodic_rates(&xs, batch, config)?;
    if lambda.multipliers.len() != r.len() {
        return Err(Error::DimensionMismatch {
            op: "lagrangian",
            expected: r.len(),
            got: lambda.multipliers.len(),
        });
    }
    let (u, f) = utility_and_constraints(&r, f_min);
    Ok(u + lambda.multipliers.iter().zip(&f).map(|(l, c)| l * c).sum::<f64>())
}

/// `∇_x` of the batch-mean Lagrangian.
fn lagrangian_gradient(model: &RateModel, x: &[f64], lambda: &[f64], batch: &[FadingRealization]) -> Vec<f64> {
    let w: Vec<f64> = lambda.iter().map(|l| 1.0 + l).collect();
    let mut g = vec![0.0; x.len()];
    for f in batch {
        for (a, b) in g.iter_mut().zip(model.weighted_gradient(x, &f.fast_gain_matrix, &w)) {
            *a += b;
        }
    }
    let m = batch.len() as f64;
    g.iter_mut().for_each(|v| *v /= m);
    g
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimalMode {
    /// Free allocation vector per network.
    #[default]
    Direct,
    /// Allocation produced by a shallow GNN whose weights are the primal.
    Gnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub eta: f64,
    /// Hard cap on dual iterations.
    pub n_dual_iters: usize,
    pub n_primal_steps: usize,
    /// Projected-ascent step in units of normalized power `x / p_max`.
    pub primal_step: f64,
    pub batch_size: usize,
    /// Fading draws behind each iterate's measured slack; this noise drives
    /// the multipliers and the burn-in test.
    pub slack_draws: usize,
    /// Fixed burn-in. `None` waits for stabilization, then takes the first
    /// trailing window that meets `window_slack_tol`, falling back to the
    /// best window seen at the iteration cap.
    pub burn_in: Option<usize>,
    /// Lower bound on the automatic burn-in.
    pub min_burn_in: usize,
    pub window: usize,
    /// Moving-window length of the diagnostics.
    pub diag_window: usize,
    pub stabilization_tol: f64,
    pub infeasible_threshold: f64,
    /// Automatic burn-in only: the returned window's in-loop mean slack
    /// must be at least `-window_slack_tol` at every receiver.
    pub window_slack_tol: f64,
    /// Window-averaged slack below `-violation_tol` counts as violated.
    pub violation_tol: f64,
    pub trace_nodes: usize,
    pub primal_mode: PrimalMode,
    /// Greedy vertex pass after each direct-mode ascent.
    pub vertex_search: bool,
    pub gnn_channels: usize,
    pub gnn_hops: usize,
    pub gnn_lr: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            n_dual_iters: 20000,
            n_primal_steps: 5,
            primal_step: 0.01,
            batch_size: 16,
            slack_draws: 16,
            burn_in: None,
            min_burn_in: 1000,
            window: 200,
            diag_window: 200,
            stabilization_tol: 1e-3,
            infeasible_threshold: 0.5,
            violation_tol: 0.02,
            window_slack_tol: 0.0,
            trace_nodes: 4,
            primal_mode: PrimalMode::Direct,
            vertex_search: true,
            gnn_channels: 16,
            gnn_hops: 2,
            gnn_lr: 1e-2,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.primal_step > 0.0) {
            return Err(invalid("eta and primal_step must be positive"));
        }
        if self.window == 0 || self.n_primal_steps == 0 || self.batch_size == 0 || self.slack_draws == 0 || self.diag_window == 0 {
            return Err(invalid("window, n_primal_steps, batch_size, slack_draws and diag_window must be positive"));
        }
        if let Some(b) = self.burn_in {
            if b + self.window > self.n_dual_iters {
                return Err(invalid(format!(
                    "burn_in {b} + window {} exceeds n_dual_iters {}",
                    self.window, self.n_dual_iters
                )));
            }
        } else if self.window > self.n_dual_iters {
            return Err(invalid("window exceeds n_dual_iters"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertDataset {
    pub network_id: String,
    /// Raw `(h_jj, Σ_{i≠j} h_ij, f_min)` per node.
    pub node_features: Vec<[f64; 3]>,
    pub samples: Vec<Allocation>,
    pub f_min: f64,
    pub burn_in: usize,
    pub step_size: f64,
}

impl ExpertDataset {
    pub fn n(&self) -> usize {
        self.node_features.len()
    }

    pub fn window(&self) -> usize {
        self.samples.len()
    }

    /// Columnwise mean of the samples.
    pub fn mean_allocation(&self) -> Result<Allocation> {
        let first = self.samples.first().ok_or(Error::Empty("mean_allocation"))?;
        let mut acc = vec![0.0; first.len()];
        for s in &self.samples {
            for (a, p) in acc.iter_mut().zip(&s.powers_mw) {
                *a += p;
            }
        }
        let m = self.samples.len() as f64;
        Ok(Allocation::new(acc.into_iter().map(|a| a / m).collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagRecord {
    pub iter: usize,
    pub fraction_violated: f64,
    pub worst_slack: f64,
    pub lambda_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertDiagnostics {
    pub traced_nodes: Vec<usize>,
    pub records: Vec<DiagRecord>,
    pub window: usize,
    pub burn_in: usize,
    pub stopped_early: bool,
    /// Smallest fraction of receivers whose window-averaged slack was
    /// below `-violation_tol`, over all diagnostic windows.
    pub min_windowed_violation: f64,
    pub infeasible_warning: bool,
    pub final_multipliers: Vec<f64>,
}

impl ExpertDiagnostics {
    /// Trailing moving averages of `(fraction_violated, worst_slack)`.
    pub fn moving_average(&self, window: usize) -> Vec<(f64, f64)> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.records.len());
        let (mut a, mut b) = (0.0, 0.0);
        for (i, r) in self.records.iter().enumerate() {
            a += r.fraction_violated;
            b += r.worst_slack;
            if i >= w {
                a -= self.records[i - w].fraction_violated;
                b -= self.records[i - w].worst_slack;
            }
            let m = (i + 1).min(w) as f64;
            out.push((a / m, b / m));
        }
        out
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "iter,fraction_violated,worst_slack")?;
        for j in &self.traced_nodes {
            write!(w, ",lambda_{j}")?;
        }
        writeln!(w)?;
        for r in &self.records {
            write!(w, "{},{},{}", r.iter, r.fraction_violated, r.worst_slack)?;
            for l in &r.lambda_trace {
                write!(w, ",{l}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ExpertRun {
    pub dataset: ExpertDataset,
    pub diagnostics: ExpertDiagnostics,
}

/// Fading batch for `(purpose, iteration, step)`, each draw on its own slot.
fn fading_batch(state: &NetworkState, seed: u64, keys: [u64; 3], size: usize) -> Vec<FadingRealization> {
    let s = derive_seed(seed, &[TAG_EXPERT, keys[0], keys[1], keys[2]]);
    (0..size as u64).map(|b| draw_fading(state, b, s)).collect()
}

const PURPOSE_ASCENT: u64 = 0;
const PURPOSE_SLACK: u64 = 1;
const PURPOSE_REFINE: u64 = 2;

/// Projected gradient ascent on the Lagrangian from `x0`.
///
/// Each step uses a fresh batch of fading draws keyed by
/// `(seed, iteration, step)`.
#[allow(clippy::too_many_arguments)]
pub fn primal_ascent(
    state: &NetworkState,
    x0: &Allocation,
    lambda: &DualState,
    n_steps: usize,
    step: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Allocation> {
    if n_steps == 0 || batch_size == 0 {
        return Err(invalid("primal_ascent needs n_steps >= 1 and batch_size >= 1"));
    }
    if x0.len() != state.n_pairs || lambda.multipliers.len() != state.n_pairs {
        return Err(Error::DimensionMismatch {
            op: "primal_ascent",
            expected: state.n_pairs,
            got: x0.len(),
        });
    }
    let p_max = state.config.p_max_mw;
    let model = RateModel::new(&state.config);
    let mut x = x0.clone();
    for s in 0..n_steps {
        let batch = fading_batch(state, seed, [PURPOSE_ASCENT, lambda.iteration as u64, s as u64], batch_size);
        let g = lagrangian_gradient(&model, &x.powers_mw, &lambda.multipliers, &batch);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "primal gradient".into(),
                step: lambda.iteration,
            });
        }
        // Step in normalized power p = x / p_max: Δp = step · ∂L/∂p.
        for (xi, gi) in x.powers_mw.iter_mut().zip(g) {
            *xi += step * p_max * p_max * gi;
        }
        x.project(p_max);
    }
    Ok(x)
}

/// Batch-mean weighted sum rate `Σ_j w_j r̄_j`, in nats.
fn weighted_utility(model: &RateModel, x: &[f64], w: &[f64], batch: &[FadingRealization]) -> f64 {
    let mut total = 0.0;
    for f in batch {
        let inter = model.interference(x, &f.fast_gain_matrix);
        for j in 0..x.len() {
            total += w[j] * (x[j] * f.fast_gain_matrix.get(j, j) / inter[j]).ln_1p();
        }
    }
    total / batch.len() as f64
}

/// Batch objective after setting the coordinates in `moves`, evaluated from
/// cached interference without mutating it.
fn objective_after(
    x: &[f64],
    inter: &[Vec<f64>],
    w: &[f64],
    batch: &[FadingRealization],
    moves: &[(usize, f64)],
) -> f64 {
    let mut total = 0.0;
    for (f, it) in batch.iter().zip(inter) {
        let h = &f.fast_gain_matrix;
        for j in 0..x.len() {
            let mut xj = x[j];
            let mut ij = it[j];
            for &(i, v) in moves {
                if i == j {
                    xj = v;
                } else {
                    ij += (v - x[i]) * h.get(i, j);
                }
            }
            total += w[j] * (xj * h.get(j, j) / ij).ln_1p();
        }
    }
    total
}

fn apply_moves(x: &mut [f64], inter: &mut [Vec<f64>], batch: &[FadingRealization], moves: &[(usize, f64)]) {
    for &(i, v) in moves {
        let d = v - x[i];
        if d == 0.0 {
            continue;
        }
        for (f, it) in batch.iter().zip(inter.iter_mut()) {
            for (j, t) in it.iter_mut().enumerate() {
                if j != i {
                    *t += d * f.fast_gain_matrix.get(i, j);
                }
            }
        }
        x[i] = v;
    }
}

/// Greedy local search over the box vertices, visiting nodes in `order`.
/// Each node tries both vertex values, and a silent node also tries taking
/// over from its dominant active interferer. A move is kept only if the
/// batch-mean weighted sum rate strictly improves.
fn coordinate_pass(
    model: &RateModel,
    mut x: Vec<f64>,
    w: &[f64],
    batch: &[FadingRealization],
    p_max: f64,
    order: &[usize],
) -> Vec<f64> {
    let n = x.len();
    let mut inter: Vec<Vec<f64>> = batch.iter().map(|f| model.interference(&x, &f.fast_gain_matrix)).collect();
    let better = |o: f64, b: f64| o > b + 1e-12 * b.abs().max(1.0);
    for &i in order {
        let current = objective_after(&x, &inter, w, batch, &[]);
        let mut best: (f64, Vec<(usize, f64)>) = (current, Vec::new());
        for v in [0.0, p_max] {
            if v != x[i] {
                let o = objective_after(&x, &inter, w, batch, &[(i, v)]);
                if better(o, best.0) {
                    best = (o, vec![(i, v)]);
                }
            }
        }
        if x[i] == 0.0 {
            let dominant = (0..n)
                .filter(|&k| k != i && x[k] > 0.0)
                .max_by(|&a, &b| {
                    let ga = x[a] * batch.iter().map(|f| f.fast_gain_matrix.get(a, i)).sum::<f64>();
                    let gb = x[b] * batch.iter().map(|f| f.fast_gain_matrix.get(b, i)).sum::<f64>();
                    ga.total_cmp(&gb)
                });
            if let Some(k) = dominant {
                let moves = [(i, p_max), (k, 0.0)];
                let o = objective_after(&x, &inter, w, batch, &moves);
                if better(o, best.0) {
                    best = (o, moves.to_vec());
                }
            }
        }
        apply_moves(&mut x, &mut inter, batch, &best.1);
    }
    x
}

/// Vertex search around the gradient iterate.
///
/// Gradient ascent stalls in local maxima where a heavily weighted link
/// stays silent, and a single coordinate flip from there rarely pays off
/// because the link that must yield is still at full power. Two candidates
/// are therefore compared on `batch`: a coordinate pass from `x`, and a
/// greedy build-up from silence that switches links on in decreasing order
/// of weighted direct gain. The better one wins, ties going to `x`.
pub fn vertex_refine(
    model: &RateModel,
    x: &Allocation,
    lambda: &DualState,
    batch: &[FadingRealization],
    p_max: f64,
) -> Allocation {
    let n = x.len();
    let w: Vec<f64> = lambda.multipliers.iter().map(|l| 1.0 + l).collect();
    let index_order: Vec<usize> = (0..n).collect();
    let local = coordinate_pass(model, x.powers_mw.clone(), &w, batch, p_max, &index_order);
    let mut priority = index_order;
    let direct: Vec<f64> = (0..n)
        .map(|j| batch.iter().map(|f| f.fast_gain_matrix.get(j, j)).sum::<f64>())
        .collect();
    priority.sort_by(|&a, &b| (w[b] * direct[b]).total_cmp(&(w[a] * direct[a])).then(a.cmp(&b)));
    let built = coordinate_pass(model, vec![0.0; n], &w, batch, p_max, &priority);
    let built = coordinate_pass(model, built, &w, batch, p_max, &priority);
    let (ul, ub) = (weighted_utility(model, &local, &w, batch), weighted_utility(model, &built, &w, batch));
    Allocation::new(if ub > ul + 1e-12 * ul.abs().max(1.0) { built } else { local })
}

/// GNN-parametrized primal: ascent on the weights, allocation read out.
struct GnnPrimal {
    net: PrimalGnn,
    shift: Arc<Csr<f64>>,
    u: Tensor<f64>,
    opt: AdamW,
    p_max: f64,
}

impl GnnPrimal {
    fn new(state: &NetworkState, f_min: f64, config: &ExpertConfig, seed: u64) -> Result<Self> {
        let norm = EdgeNormalization::fit([state])?;
        let op = build_operator(state, &norm, 1)?;
        let s = op.shift_matrix();
        let shift = Arc::new(Csr::from_dense(s.rows(), s.cols(), s.data()));
        let raw = state.node_features(f_min);
        let u = FeatureStats::fit(&raw)?.normalize(&raw);
        Ok(Self {
            net: PrimalGnn::init(config.gnn_channels, config.gnn_hops, derive_seed(seed, &[TAG_PRIMAL_INIT])),
            shift,
            u: Tensor::matrix(u.len(), 3, u.iter().flatten().copied().collect()),
            opt: AdamW::new(AdamWConfig {
                lr: config.gnn_lr,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            }),
            p_max: state.config.p_max_mw,
        })
    }

    fn allocation(&self) -> Result<Allocation> {
        let mut tape = Tape::new();
        let b = self.net.params.bind_frozen(&mut tape);
        let u = tape.constant(self.u.clone());
        let x = self.net.forward(&mut tape, &b, &self.shift, u, self.p_max)?;
        Ok(Allocation::new(tape.value(x).data().to_vec()))
    }

    fn ascent(&mut self, state: &NetworkState, lambda: &DualState, config: &ExpertConfig, seed: u64) -> Result<Allocation> {
        let model = RateModel::new(&state.config);
        for s in 0..config.n_primal_steps {
            let mut tape = Tape::new();
            let b = self.net.params.bind(&mut tape);
            let u = tape.constant(self.u.clone());
            let x = self.net.forward(&mut tape, &b, &self.shift, u, self.p_max)?;
            let xv = tape.value(x).data().to_vec();
            let batch = fading_batch(
                state,
                seed,
                [PURPOSE_ASCENT, lambda.iteration as u64, s as u64],
                config.batch_size,
            );
            let g = lagrangian_gradient(&model, &xv, &lambda.multipliers, &batch);
            // Minimize -L.
            let seed_grad = Tensor::matrix(g.len(), 1, g.iter().map(|v| -v).collect());
            let grads = tape.backward_seeded(x, seed_grad)?;
            let grads = self.net.params.collect_grads(&grads, &b);
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite {
                    context: "gnn primal gradient".into(),
                    step: lambda.iteration,
                });
            }
            self.opt.step(&mut self.net.params, &grads);
        }
        self.allocation()
    }
}

/// Relative-change test used by the automatic burn-in.
fn stabilized(a: (f64, f64), b: (f64, f64), tol: f64) -> bool {
    let close = |p: f64, q: f64| (p - q).abs() <= tol * p.abs().max(q.abs()).max(1.0);
    close(a.0, b.0) && close(a.1, b.1)
}

/// Runs the expert on one network and returns its final primal window.
pub fn run_expert(
    state: &NetworkState,
    network_id: &str,
    f_min: f64,
    config: &ExpertConfig,
    seed: u64,
) -> Result<ExpertRun> {
    config.validate()?;
    state.validate()?;
    if !(f_min >= 0.0 && f_min.is_finite()) {
        return Err(invalid(format!("f_min must be nonnegative, got {f_min}")));
    }
    let n = state.n_pairs;
    let p_max = state.config.p_max_mw;
    let model = RateModel::new(&state.config);
    let traced: Vec<usize> = (0..n.min(config.trace_nodes)).collect();

    let mut gnn = match config.primal_mode {
        PrimalMode::Gnn => Some(GnnPrimal::new(state, f_min, config, seed)?),
        PrimalMode::Direct => None,
    };
    let mut x = match &gnn {
        Some(g) => g.allocation()?,
        None => Allocation::constant(n, p_max / 2.0),
    };
    let mut lambda = DualState::zeros(n);
    let mut records = Vec::new();
    // Trailing window of iterates and of their measured slacks.
    let mut window: VecDeque<Allocation> = VecDeque::with_capacity(config.window);
    let mut window_slack: VecDeque<Vec<f64>> = VecDeque::with_capacity(config.window);
    let mut window_slack_sum = vec![0.0; n];
    // Best feasible-looking trailing window seen after stabilization.
    let mut best: Option<(f64, usize, Vec<Allocation>)> = None;

    // Diagnostic window accumulators.
    let mut diag_sum = (0.0, 0.0);
    let mut slack_sum = vec![0.0; n];
    let mut prev_diag: Option<(f64, f64)> = None;
    let mut min_windowed_violation = f64::INFINITY;
    let mut stabilized_at: Option<usize> = None;
    let stop_at = config.burn_in.map(|b| b + config.window);
    let mut accepted = false;
    let mut rates_buf = vec![0.0; n];

    let mut k = 0;
    while k < config.n_dual_iters && stop_at.is_none_or(|s| k < s) {
        x = match gnn.as_mut() {
            Some(g) => g.ascent(state, &lambda, config, seed)?,
            None => {
                let ascended = primal_ascent(
                    state,
                    &x,
                    &lambda,
                    config.n_primal_steps,
                    config.primal_step,
                    config.batch_size,
                    seed,
                )?;
                if config.vertex_search {
                    let batch = fading_batch(state, seed, [PURPOSE_REFINE, k as u64, 0], config.batch_size);
                    vertex_refine(&model, &ascended, &lambda, &batch, p_max)
                } else {
                    ascended
                }
            }
        };
        let batch = fading_batch(state, seed, [PURPOSE_SLACK, k as u64, 0], config.slack_draws);
        let mut mean = vec![0.0; n];
        for f in &batch {
            model.rates_into(&x.powers_mw, &f.fast_gain_matrix, &mut rates_buf);
            for (m, r) in mean.iter_mut().zip(&rates_buf) {
                *m += r / batch.len() as f64;
            }
        }
        let slack: Vec<f64> = mean.iter().map(|r| r - f_min).collect();
        if slack.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "constraint slack".into(),
                step: k,
            });
        }
        let fraction_violated = slack.iter().filter(|v| **v < 0.0).count() as f64 / n as f64;
        let worst_slack = slack.iter().copied().fold(f64::INFINITY, f64::min);
        records.push(DiagRecord {
            iter: k,
            fraction_violated,
            worst_slack,
            lambda_trace: traced.iter().map(|&j| lambda.multipliers[j]).collect(),
        });

        diag_sum.0 += fraction_violated;
        diag_sum.1 += worst_slack;
        slack_sum.iter_mut().zip(&slack).for_each(|(a, s)| *a += s);

        if window.len() == config.window {
            window.pop_front();
            let old = window_slack.pop_front().expect("slack ring tracks the window");
            window_slack_sum.iter_mut().zip(&old).for_each(|(a, s)| *a -= s);
        }
        window.push_back(x.clone());
        window_slack_sum.iter_mut().zip(&slack).for_each(|(a, s)| *a += s);
        window_slack.push_back(slack.clone());
        lambda = dual_update(&lambda, &slack, config.eta)?;
        k += 1;

        if k % config.diag_window == 0 {
            let m = config.diag_window as f64;
            let current = (diag_sum.0 / m, diag_sum.1 / m);
            let violated = slack_sum.iter().filter(|s| **s / m < -config.violation_tol).count();
            min_windowed_violation = min_windowed_violation.min(violated as f64 / n as f64);
            if stabilized_at.is_none() && k >= config.min_burn_in {
                if let Some(p) = prev_diag {
                    if stabilized(p, current, config.stabilization_tol) {
                        stabilized_at = Some(k);
                    }
                }
            }
            prev_diag = Some(current);
            diag_sum = (0.0, 0.0);
            slack_sum.iter_mut().for_each(|a| *a = 0.0);
        }

        // Automatic burn-in: once the diagnostics have settled, stop at the
        // first trailing window that is feasible on average. Multipliers
        // move by `eta` times the slack, so a window's mean slack is minus
        // the multiplier drift over it divided by `eta * window`.
        if config.burn_in.is_none() && stabilized_at.is_some() && window.len() == config.window {
            let worst = window_slack_sum.iter().map(|s| s / config.window as f64).fold(f64::INFINITY, f64::min);
            if worst >= -config.window_slack_tol {
                accepted = true;
                break;
            }
            if best.as_ref().is_none_or(|b| worst > b.0) {
                best = Some((worst, k - config.window, window.iter().cloned().collect()));
            }
        }
    }
    // Partial trailing window (runs shorter than one diagnostic window).
    let rem = k % config.diag_window;
    if rem > 0 && min_windowed_violation.is_infinite() {
        let violated = slack_sum.iter().filter(|s| **s / (rem as f64) < -config.violation_tol).count();
        min_windowed_violation = violated as f64 / n as f64;
    }
    log::debug!(
        "{network_id}: accepted={accepted} best={:?} stabilized_at={stabilized_at:?}",
        best.as_ref().map(|b| (b.0, b.1))
    );
    let (burn_in, samples) = match best {
        Some((_, start, samples)) if !accepted => (start, samples),
        _ => (k - window.len(), window.into_iter().collect()),
    };
    let stopped_early = k < config.n_dual_iters;
    let infeasible_warning = min_windowed_violation >= config.infeasible_threshold;
    if infeasible_warning {
        log::warn!(
            "{network_id}: windowed violation never fell below {} at f_min = {f_min}",
            config.infeasible_threshold
        );
    }
    Ok(ExpertRun {
        dataset: ExpertDataset {
            network_id: network_id.to_string(),
            node_features: state.node_features(f_min),
            samples,
            f_min,
            burn_in,
            step_size: config.eta,
        },
        diagnostics: ExpertDiagnostics {
            traced_nodes: traced,
            records,
            window: config.diag_window,
            burn_in,
            stopped_early,
            min_windowed_violation,
            infeasible_warning,
            final_multipliers: lambda.multipliers,
        },
    })
}

/// Payload kinds sharing the sample-set binary layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSetKind {
    Expert,
    Generated,
}

impl SampleSetKind {
    pub fn magic(self) -> &'static [u8; 4] {
        match self {
            SampleSetKind::Expert => b"EXPD",
            SampleSetKind::Generated => b"GEND",
        }
    }
}

pub const SAMPLE_SET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    network_id: String,
    f_min: f64,
    burn_in: usize,
    eta: f64,
    window: usize,
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes the binary payload and its JSON sidecar.
pub fn write_sample_set(bin: &Path, kind: SampleSetKind, data: &ExpertDataset) -> Result<()> {
    let n = data.n();
    if data.samples.iter().any(|s| s.len() != n) {
        return Err(invalid("sample width differs from node count"));
    }
    let mut w = BufWriter::new(File::create(bin)?);
    w.write_all(kind.magic())?;
    w.write_all(&SAMPLE_SET_VERSION.to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(data.window() as u32).to_le_bytes())?;
    for s in &data.samples {
        for p in &s.powers_mw {
            w.write_all(&(*p as f32).to_le_bytes())?;
        }
    }
    for f in &data.node_features {
        for v in f {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    let side = Sidecar {
        network_id: data.network_id.clone(),
        f_min: data.f_min,
        burn_in: data.burn_in,
        eta: data.step_size,
        window: data.window(),
    };
    std::fs::write(sidecar_path(bin), serde_json::to_string_pretty(&side)? + "\n")?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Reads a sample set. Metadata comes from the sidecar, values from the
/// payload (stored as 32-bit floats).
pub fn read_sample_set(bin: &Path) -> Result<(SampleSetKind, ExpertDataset)> {
    let mut r = BufReader::new(File::open(bin)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    let kind = match &magic {
        b"EXPD" => SampleSetKind::Expert,
        b"GEND" => SampleSetKind::Generated,
        other => return Err(Error::Format(format!("bad sample-set magic {other:?}"))),
    };
    let version = read_u32(&mut r)?;
    if version != SAMPLE_SET_VERSION {
        return Err(Error::Format(format!("unsupported sample-set version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let window = read_u32(&mut r)? as usize;
    let flat = read_f32s(&mut r, n * window)?;
    let feats = read_f32s(&mut r, n * 3)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in sample set", rest.len())));
    }
    let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(bin))?)?;
    if side.window != window {
        return Err(Error::Format("sidecar window disagrees with payload".into()));
    }
    Ok((
        kind,
        ExpertDataset {
            network_id: side.network_id,
            node_features: feats.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            samples: flat.chunks(n.max(1)).take(window).map(|c| Allocation::new(c.to_vec())).collect(),
            f_min: side.f_min,
            burn_in: side.burn_in,
            step_size: side.eta,
        },
    ))
}
