//! Acceptance suite. Runs as a plain binary and prints one PASS/FAIL line
//! per criterion; the process fails if any criterion fails.
//!
//! `DIFFALLOC_ACCEPT=1,4,7` restricts the run to the listed criteria.
//! Criteria 5, 8 and 10 share one desk-scale pipeline workspace.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use diffalloc::channel::{
    draw_fading, generate_network, side_for_density, FadingModel, FadingRealization, NetworkState, PhysicalConfig,
};
use diffalloc::cli::{self, Command};
use diffalloc::config::ExperimentConfig;
use diffalloc::diffusion::{ddim_sample, forward_noise, NoisePredictor, NoiseSchedule, SamplerConfig, ScheduleConfig};
use diffalloc::error::Result as DResult;
use diffalloc::eval::{percentile, time_share, PolicySpec};
use diffalloc::expert::{read_sample_set, run_expert, ExpertConfig};
use diffalloc::gnn::{build_operator, DenoiserConfig, DenoiserModel, EdgeNormalization, FeatureStats, GraphBatch};
use diffalloc::linalg::Matrix;
use diffalloc::manifest::Manifest;
use diffalloc::policy::TrainedPolicy;
use diffalloc::rates::{rate_gradient, Allocation, RateModel};
use diffalloc::train::{train_denoiser, ElementSet, TrainConfig};
use diffalloc_tensor::{Axis, Csr, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Per-node ergodic rates of `samples`, each held for `draws` fading slots.
fn window_rates(state: &NetworkState, samples: &[Allocation], draws: u64, seed: u64) -> Vec<f64> {
    let model = RateModel::new(&state.config);
    let n = state.n_pairs;
    let mut acc = vec![0.0; n];
    let mut buf = vec![0.0; n];
    for (i, x) in samples.iter().enumerate() {
        for d in 0..draws {
            let f = draw_fading(state, i as u64 * draws + d, seed);
            model.rates_into(&x.powers_mw, &f.fast_gain_matrix, &mut buf);
            acc.iter_mut().zip(&buf).for_each(|(a, r)| *a += r);
        }
    }
    let t = (samples.len() as u64 * draws) as f64;
    acc.into_iter().map(|a| a / t).collect()
}

/// Ergodic single-user rate of every link.
fn solo_rates(state: &NetworkState, draws: u64) -> Vec<f64> {
    let n = state.n_pairs;
    (0..n)
        .map(|j| {
            let mut x = vec![0.0; n];
            x[j] = state.config.p_max_mw;
            window_rates(state, &[Allocation::new(x)], draws, 77)[j]
        })
        .collect()
}

fn desk_expert() -> ExpertConfig {
    ExperimentConfig::default().expert
}

// ---------------------------------------------------------------- 1

const FD_TRIALS: usize = 100;
const FD_STEP: f64 = 1e-6;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Worst relative error of one primitive's backward rule on `input`.
fn primitive_error<F>(input: &Tensor<f64>, weight_seed: u64, op: F) -> f64
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let eval = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let out = op(&mut tape, xv);
        let shape = tape.shape(out).to_vec();
        let mut wr = ChaCha8Rng::seed_from_u64(weight_seed);
        let w = Tensor::new(shape.clone(), (0..shape.iter().product()).map(|_| wr.gen_range(-1.0..1.0)).collect())
            .expect("weight shape");
        let wv = tape.constant(w);
        let p = tape.mul(out, wv).expect("same shape");
        let s = tape.sum(p);
        let val = tape.value(s).item();
        let g = tape.backward(s).expect("scalar loss");
        (val, g.get(xv).cloned())
    };
    let grad = eval(input)
        .1
        .unwrap_or_else(|| Tensor::new(input.shape().to_vec(), vec![0.0; input.numel()]).expect("shape"));
    let mut worst: f64 = 0.0;
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = input.clone();
        minus.data_mut()[i] -= FD_STEP;
        let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * FD_STEP);
        worst = worst.max(rel(grad.data()[i], fd));
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.5..1.5))
}

/// Magnitudes in [0.05, 1.5] so kinks are never straddled.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| {
        let m = rng.gen_range(0.05..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn primitive_errors() -> BTreeMap<&'static str, f64> {
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..FD_TRIALS as u64 {
        let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let x = rand_tensor(&mut rng, r, c);
        let other = rand_tensor(&mut rng, r, c);
        let right_cols = rng.gen_range(1..4);
        let right = rand_tensor(&mut rng, c, right_cols);
        let left_rows = rng.gen_range(1..4);
        let left = rand_tensor(&mut rng, left_rows, r);

        let (o, rt, lt) = (other.clone(), right.clone(), left.clone());
        note("matmul", primitive_error(&x, trial, move |t, v| {
            let b = t.constant(rt.clone());
            t.matmul(v, b).unwrap()
        }));
        note("matmul", primitive_error(&x, trial, move |t, v| {
            let a = t.constant(lt.clone());
            t.matmul(a, v).unwrap()
        }));
        let o2 = o.clone();
        note("add", primitive_error(&x, trial, move |t, v| {
            let b = t.constant(o2.clone());
            t.add(v, b).unwrap()
        }));
        let o2 = o.clone();
        note("sub", primitive_error(&x, trial, move |t, v| {
            let b = t.constant(o2.clone());
            t.sub(b, v).unwrap()
        }));
        note("mul", primitive_error(&x, trial, move |t, v| {
            let b = t.constant(o.clone());
            t.mul(v, b).unwrap()
        }));
        note("mul", primitive_error(&x, trial, |t, v| t.mul(v, v).unwrap()));
        let c0 = rng.gen_range(-2.0..2.0);
        note("scale", primitive_error(&x, trial, move |t, v| t.scale(v, c0)));
        note("add_scalar", primitive_error(&x, trial, move |t, v| t.add_scalar(v, c0)));
        let kinked = rand_away_from_zero(&mut rng, r, c);
        note("relu", primitive_error(&kinked, trial, |t, v| t.relu(v)));
        note("silu", primitive_error(&x, trial, |t, v| t.silu(v)));
        note("sigmoid", primitive_error(&x, trial, |t, v| t.sigmoid(v)));
        if c > 1 {
            note("layer_norm", primitive_error(&x, trial, |t, v| t.layer_norm(v, 1e-5).unwrap()));
        }
        note("sum", primitive_error(&x, trial, |t, v| t.sum(v)));
        note("mean", primitive_error(&x, trial, |t, v| t.mean(v)));
        let row = rand_tensor(&mut rng, 1, c);
        let reps = rng.gen_range(1..5);
        note("broadcast_rows", primitive_error(&row, trial, move |t, v| t.broadcast_rows(v, reps).unwrap()));
        let side = rand_tensor(&mut rng, r, 2);
        note("concat", primitive_error(&x, trial, move |t, v| {
            let s = t.constant(side.clone());
            t.concat(&[s, v, v], Axis::Cols).unwrap()
        }));
        let below = rand_tensor(&mut rng, 2, c);
        note("concat", primitive_error(&x, trial, move |t, v| {
            let b = t.constant(below.clone());
            t.concat(&[v, b], Axis::Rows).unwrap()
        }));
        let start = rng.gen_range(0..c);
        let len = rng.gen_range(1..=c - start);
        note("narrow", primitive_error(&x, trial, move |t, v| t.narrow(v, Axis::Cols, start, len).unwrap()));
        let index: Arc<[usize]> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..r)).collect();
        note("gather_rows", primitive_error(&x, trial, move |t, v| t.gather_rows(v, index.clone()).unwrap()));
        let out_rows = rng.gen_range(1..5);
        let mut trip = Vec::new();
        for i in 0..out_rows {
            for j in 0..r {
                if rng.gen_bool(0.6) {
                    trip.push((i, j, rng.gen_range(-1.0..1.0)));
                }
            }
        }
        let sp = Arc::new(Csr::from_triplets(out_rows, r, trip).unwrap());
        note("spmm", primitive_error(&x, trial, move |t, v| t.spmm(sp.clone(), v).unwrap()));
        let target = rand_tensor(&mut rng, r, c);
        let tc = target.clone();
        note("mse_loss", primitive_error(&x, trial, move |t, v| {
            let tv = t.constant(tc.clone());
            t.mse_loss(v, tv).unwrap()
        }));
        note("mse_loss", primitive_error(&x, trial, move |t, v| {
            let pv = t.constant(target.clone());
            t.mse_loss(pv, v).unwrap()
        }));
    }
    worst
}

/// Worst error of the analytic rate Jacobian, relative to its largest entry.
fn rate_jacobian_error() -> DResult<f64> {
    let cfg = PhysicalConfig {
        fading: FadingModel::None,
        ..PhysicalConfig::default()
    };
    let model = RateModel::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..FD_TRIALS {
        let n = rng.gen_range(2..=8);
        let h = Matrix::from_fn(n, n, |i, j| {
            let e: f64 = if i == j { rng.gen_range(-9.0..-7.0) } else { rng.gen_range(-12.0..-8.0) };
            10f64.powf(e)
        });
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..10.0)).collect();
        let fading = FadingRealization {
            fast_gain_matrix: h.clone(),
            slot_index: 0,
        };
        let jac = rate_gradient(&Allocation::new(x.clone()), &fading, &cfg)?;
        let scale = jac.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            let step = 1e-5 * x[i];
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += step;
            xm[i] -= step;
            let (rp, rm) = (model.rates(&xp, &h), model.rates(&xm, &h));
            for j in 0..n {
                let fd = (rp[j] - rm[j]) / (2.0 * step);
                worst = worst.max((jac.get(i, j) - fd).abs() / scale);
            }
        }
    }
    Ok(worst)
}

/// Loss of `model` on one fixed noised batch.
fn ugnn_loss<T: diffalloc_tensor::Scalar>(
    model: &DenoiserModel<T>,
    batch: &GraphBatch<T>,
    x_k: &[f64],
    u: &[[f64; 3]],
    eps: &[f64],
    steps: &[usize],
    with_grad: bool,
) -> DResult<(f64, Vec<Tensor<T>>)> {
    let rows = x_k.len();
    let mut tape = Tape::new();
    let b = if with_grad {
        model.params.bind(&mut tape)
    } else {
        model.params.bind_frozen(&mut tape)
    };
    let x = tape.constant(Tensor::matrix(rows, 1, x_k.iter().map(|&v| T::of(v)).collect()));
    let uv = tape.constant(Tensor::matrix(rows, 3, u.iter().flatten().map(|&v| T::of(v)).collect()));
    let e = tape.constant(Tensor::matrix(rows, 1, eps.iter().map(|&v| T::of(v)).collect()));
    let pred = model.forward(&mut tape, &b, batch, x, uv, steps)?;
    let loss = tape.mse_loss(pred, e)?;
    let value = tape.value(loss).item().as_f64();
    let grads = if with_grad {
        model.params.collect_grads(&tape.backward(loss)?, &b)
    } else {
        Vec::new()
    };
    Ok((value, grads))
}

/// 32-bit gradient of the full denoiser loss along random directions,
/// against 64-bit central differences.
fn ugnn_directional_error() -> DResult<f64> {
    let state = generate_network(12, side_for_density(12, 8.0), &PhysicalConfig::default(), 3)?;
    let norm = EdgeNormalization::fit([&state])?;
    let raw = state.node_features(0.6);
    let u1 = FeatureStats::fit(&raw)?.normalize(&raw);
    let arch = DenoiserConfig::desk();
    let op = build_operator(&state, &norm, arch.depth)?;
    let model32 = DenoiserModel::<f32>::init(arch, 5)?;
    let model64 = model32.cast::<f64>();
    let batch32 = GraphBatch::<f32>::new(&[&op, &op])?;
    let batch64 = GraphBatch::<f64>::new(&[&op, &op])?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let rows = 2 * state.n_pairs;
    let x_k: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
    let eps: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
    let u = u1.repeat(2);
    let steps = [37, 410];
    let (_, g32) = ugnn_loss(&model32, &batch32, &x_k, &u, &eps, &steps, true)?;
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let dir: Vec<Vec<f64>> = g32.iter().map(|g| (0..g.numel()).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let norm2: f64 = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let dir: Vec<Vec<f64>> = dir.into_iter().map(|d| d.into_iter().map(|v| v / norm2).collect()).collect();
        let analytic: f64 = g32
            .iter()
            .zip(&dir)
            .map(|(g, d)| g.data().iter().zip(d).map(|(a, b)| *a as f64 * b).sum::<f64>())
            .sum();
        let shifted = |s: f64| -> DResult<f64> {
            let mut m = model64.clone();
            for (t, d) in m.params.tensors_mut().iter_mut().zip(&dir) {
                t.data_mut().iter_mut().zip(d).for_each(|(p, v)| *p += s * v);
            }
            Ok(ugnn_loss(&m, &batch64, &x_k, &u, &eps, &steps, false)?.0)
        };
        let h = 1e-5;
        let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        worst = worst.max((analytic - fd).abs() / fd.abs().max(1e-3));
    }
    Ok(worst)
}

fn criterion_1() -> Outcome {
    let rate = rate_jacobian_error().map_err(err)?;
    let prims = primitive_errors();
    let (worst_name, worst_prim) = prims
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (*k, *v))
        .unwrap_or(("none", 0.0));
    let ugnn = ugnn_directional_error().map_err(err)?;
    let pass = rate < 1e-6 && worst_prim < 1e-6 && ugnn < 1e-4;
    Ok((
        pass,
        format!(
            "rate Jacobian {rate:.1e} (<1e-6), {} primitives worst {worst_prim:.1e} at {worst_name} (<1e-6), U-GNN f32 directional {ugnn:.1e} (<1e-4)",
            prims.len()
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut worst = f64::INFINITY;
    let mut notes = Vec::new();
    for inst in 0..10u64 {
        let n = 2 + inst as usize % 9;
        let state = generate_network(n, side_for_density(n, 11.9), &PhysicalConfig::default(), 1000 + inst).map_err(err)?;
        let solo = solo_rates(&state, 4000);
        let tdma = solo.iter().copied().fold(f64::INFINITY, f64::min) / n as f64;
        let f_min = (0.5 * tdma).min(1.0);
        let run = run_expert(&state, "c2", f_min, &desk_expert(), 40 + inst).map_err(err)?;
        let r = window_rates(&state, &run.dataset.samples, 100, 900 + inst);
        let w = r.iter().map(|v| v - f_min).fold(f64::INFINITY, f64::min);
        worst = worst.min(w);
        notes.push(format!("N={n}:{w:+.3}"));
    }
    Ok((
        worst >= -0.02,
        format!("worst window-averaged slack {worst:+.4} (>= -0.02); {}", notes.join(" ")),
    ))
}

// ---------------------------------------------------------------- 3

/// Best time-shared sum rate over pairs of grid allocations.
fn time_sharing_oracle(points: &[[f64; 2]], f_min: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for a in points {
        for b in points {
            // theta * a + (1 - theta) * b >= f_min componentwise.
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for j in 0..2 {
                let d = a[j] - b[j];
                let need = f_min - b[j];
                if d.abs() < 1e-15 {
                    if need > 0.0 {
                        lo = 2.0;
                    }
                } else if d > 0.0 {
                    lo = lo.max(need / d);
                } else {
                    hi = hi.min(need / d);
                }
            }
            if lo <= hi {
                for th in [lo, hi] {
                    best = best.max(th * (a[0] + a[1]) + (1.0 - th) * (b[0] + b[1]));
                }
            }
        }
    }
    best
}

fn criterion_3() -> Outcome {
    let mut worst_ratio = f64::INFINITY;
    let mut notes = Vec::new();
    for inst in 0..5u64 {
        let state = generate_network(2, side_for_density(2, 11.9), &PhysicalConfig::default(), 2000 + inst).map_err(err)?;
        let p_max = state.config.p_max_mw;
        let draws = 2000;
        let grid: Vec<Allocation> = (0..21)
            .flat_map(|a| (0..21).map(move |b| Allocation::new(vec![a as f64 / 20.0 * p_max, b as f64 / 20.0 * p_max])))
            .collect();
        let points: Vec<[f64; 2]> = grid
            .iter()
            .map(|x| {
                let r = window_rates(&state, std::slice::from_ref(x), draws, 5);
                [r[0], r[1]]
            })
            .collect();
        let solo = [points[20 * 21][0], points[20][1]];
        let f_min = 0.3 * solo[0].min(solo[1]);
        let oracle = time_sharing_oracle(&points, f_min);
        let run = run_expert(&state, "c3", f_min, &desk_expert(), 60 + inst).map_err(err)?;
        // Same fading draws as the oracle grid.
        let model = RateModel::new(&state.config);
        let mut util = 0.0;
        for x in &run.dataset.samples {
            for d in 0..draws {
                let f = draw_fading(&state, d, 5);
                util += model.rates(&x.powers_mw, &f.fast_gain_matrix).iter().sum::<f64>();
            }
        }
        util /= (run.dataset.samples.len() as u64 * draws) as f64;
        let ratio = util / oracle;
        worst_ratio = worst_ratio.min(ratio);
        notes.push(format!("{util:.3}/{oracle:.3}"));
    }
    Ok((
        worst_ratio >= 0.95,
        format!("worst expert/oracle utility {worst_ratio:.4} (>= 0.95); {}", notes.join(" ")),
    ))
}

// ---------------------------------------------------------------- 4

/// Exact noise for a planted signal.
struct PlantedOracle {
    x0: Vec<f64>,
    n: usize,
    schedule: NoiseSchedule,
}

impl NoisePredictor for PlantedOracle {
    fn block_sizes(&self) -> Vec<usize> {
        vec![self.n; self.x0.len() / self.n]
    }

    fn predict(&self, x_k: &[f64], steps: &[usize]) -> DResult<Vec<f64>> {
        Ok(x_k
            .iter()
            .zip(&self.x0)
            .enumerate()
            .map(|(r, (x, x0))| {
                let ab = self.schedule.alpha_bar(steps[r / self.n]);
                (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()
            })
            .collect())
    }
}

fn criterion_4() -> Outcome {
    let schedule = NoiseSchedule::from_config(&ScheduleConfig::default()).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, chains) = (10, 4);
    let x0: Vec<f64> = (0..n * chains).map(|_| rng.gen_range(-0.95..0.95)).collect();
    let oracle = PlantedOracle {
        x0: x0.clone(),
        n,
        schedule: schedule.clone(),
    };
    let keys: Vec<[u64; 2]> = (0..chains as u64).map(|c| [9, c]).collect();
    let out = ddim_sample(&oracle, &schedule, &SamplerConfig::default(), &keys).map_err(err)?;
    let recon = out.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let m = 400_000;
    let mut var_err: f64 = 0.0;
    for &k in &[1, 50, 250, 500] {
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..m {
            let e: f64 = rng.sample(StandardNormal);
            let v = forward_noise(&[0.3], k, &schedule, &[e]).map_err(err)?[0];
            s += v;
            s2 += v * v;
        }
        let mean = s / m as f64;
        let var = s2 / m as f64 - mean * mean;
        let want = 1.0 - schedule.alpha_bar(k);
        var_err = var_err.max((var - want).abs() / want);
    }

    let monotone = schedule.alpha_bar(0) == 1.0
        && (1..=schedule.len()).all(|k| schedule.alpha_bar(k) < schedule.alpha_bar(k - 1) && schedule.alpha_bar(k) > 0.0);
    Ok((
        recon < 1e-4 && var_err < 0.01 && monotone,
        format!(
            "oracle DDIM max error {recon:.1e} (<1e-4), forward variance rel error {:.2}% (<1%), alpha_bar strictly decreasing: {monotone}",
            100.0 * var_err
        ),
    ))
}

// ---------------------------------------------------------------- 5, 8, 10

struct Desk {
    _dir: tempfile::TempDir,
    root: PathBuf,
    f_min: f64,
    seconds: f64,
}

fn desk_config() -> DResult<ExperimentConfig> {
    ExperimentConfig::default().with_overrides(&["eval.t_slots=1000"])
}

fn desk() -> std::result::Result<&'static Desk, String> {
    static DESK: OnceLock<std::result::Result<Desk, String>> = OnceLock::new();
    DESK.get_or_init(|| {
        let dir = tempfile::tempdir().map_err(err)?;
        let root = dir.path().to_path_buf();
        let cfg = desk_config().map_err(err)?;
        let t = Instant::now();
        cli::execute(&root, &cfg, &Command::RunAll).map_err(err)?;
        Ok(Desk {
            _dir: dir,
            root,
            f_min: cfg.f_min_grid[0],
            seconds: t.elapsed().as_secs_f64(),
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

/// Rows of a CSV file keyed by header name.
fn read_csv(path: &Path) -> std::result::Result<Vec<BTreeMap<String, String>>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or_default().split(',').map(str::to_string).collect();
    Ok(lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(str::to_string)).collect())
        .collect())
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row.get(key).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

fn pooled(rows: &[BTreeMap<String, String>]) -> Option<&BTreeMap<String, String>> {
    rows.iter().find(|r| r.get("network").map(String::as_str) == Some("pooled"))
}

/// Pooled p5 of policies that draw `n_samples` allocations uniformly from
/// each test network's own expert window, i.e. an exact imitator.
fn resampled_expert_p5(d: &Desk, gen_rows: &[BTreeMap<String, String>]) -> std::result::Result<f64, String> {
    let cfg = desk_config().map_err(err)?;
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.root.join("networks/index.json")).map_err(err)?).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut pooled = Vec::new();
    for id in gen_rows.iter().filter_map(|r| r.get("network")).filter(|n| *n != "pooled") {
        let rel = index["networks"]
            .as_array()
            .and_then(|a| a.iter().find(|e| e["id"] == id.as_str()))
            .and_then(|e| e["path"].as_str())
            .ok_or(format!("{id} not in the network index"))?;
        let state: NetworkState = serde_json::from_str(&std::fs::read_to_string(d.root.join(rel)).map_err(err)?).map_err(err)?;
        let (_, expert) = read_sample_set(&d.root.join(format!("expert/{id}_f{:.3}.expd", d.f_min))).map_err(err)?;
        let draw: Vec<Allocation> = (0..cfg.n_samples)
            .map(|_| expert.samples[rng.gen_range(0..expert.samples.len())].clone())
            .collect();
        let report = time_share(&PolicySpec::GeneratedSamples(draw), &state, id, d.f_min, &cfg.eval).map_err(err)?;
        pooled.extend_from_slice(report.final_rates());
    }
    percentile(&pooled, 5.0).map_err(err)
}

fn criterion_5() -> Outcome {
    let d = desk()?;
    let table = |label: &str| read_csv(&d.root.join("reports").join(label).join("summary.csv"));
    let (gen, exp, ap, fp) = (table("generated")?, table("expert")?, table("average_power")?, table("full_power")?);
    let (g, e) = (pooled(&gen).ok_or("no pooled generated row")?, pooled(&exp).ok_or("no pooled expert row")?);
    let mean_ratio = num(g, "mean") / num(e, "mean");
    let p5 = num(g, "p5");
    let per_net_min = |rows: &[BTreeMap<String, String>]| {
        // Densest-level networks carry the d0 prefix.
        rows.iter()
            .filter(|r| r.get("network").is_some_and(|n| n.starts_with("d0-")))
            .map(|r| num(r, "p5"))
            .fold(f64::INFINITY, f64::min)
    };
    let (ap_min, fp_min) = (per_net_min(&ap), per_net_min(&fp));
    let ceiling = resampled_expert_p5(d, &gen)?;
    let pass = mean_ratio >= 0.95 && p5 >= d.f_min - 0.05 && ap_min < d.f_min && fp_min < d.f_min;
    Ok((
        pass,
        format!(
            "generated/expert mean {mean_ratio:.3} (>= 0.95), generated p5 {p5:.3} vs expert {:.3} (>= {:.2}; a perfect imitator drawing {} samples reaches {ceiling:.3}), worst strong-interference p5 AP {ap_min:.3} FP {fp_min:.3} (< {:.1}); pipeline {:.0}s",
            num(e, "p5"),
            d.f_min - 0.05,
            desk_config().map_err(err)?.n_samples,
            d.f_min,
            d.seconds
        ),
    ))
}

/// Pooled rows of a sweep table as (density, x) -> p5.
fn pooled_p5(rows: &[BTreeMap<String, String>], x: &str) -> BTreeMap<(i64, i64), f64> {
    rows.iter()
        .filter(|r| r.get("network").map(String::as_str) == Some("pooled"))
        .map(|r| (((num(r, "density") * 100.0).round() as i64, (num(r, x) * 10.0).round() as i64), num(r, "p5")))
        .collect()
}

fn densities(p5: &BTreeMap<(i64, i64), f64>) -> Vec<i64> {
    let mut d: Vec<i64> = p5.keys().map(|k| k.0).collect();
    d.dedup();
    d
}

fn criterion_8() -> Outcome {
    let d = desk()?;
    let p5 = pooled_p5(&read_csv(&d.root.join("sweeps").join("size.csv"))?, "n_pairs");
    let mut pass = true;
    let mut notes = Vec::new();
    for dens in densities(&p5) {
        let at = |n: i64| p5.get(&(dens, n * 10)).copied().ok_or(format!("no pooled row for N={n}"));
        let base = at(20)?;
        for n in [10, 40] {
            let dev = (at(n)? - base) / base;
            pass &= dev.abs() <= 0.15;
            notes.push(format!("{:.1}/km2 N={n} {:.3} vs {base:.3} ({:+.0}%)", dens as f64 / 100.0, at(n)?, 100.0 * dev));
        }
    }
    Ok((pass, format!("{} (within 15%)", notes.join(", "))))
}

fn criterion_10() -> Outcome {
    let d = desk()?;
    let fresh = tempfile::tempdir().map_err(err)?;
    cli::replay(&d.root, fresh.path()).map_err(err)?;
    let manifest = Manifest::load(&d.root).map_err(err)?;
    let csvs: Vec<&String> = manifest.entries.keys().filter(|p| p.ends_with(".csv")).collect();
    let mut differing = Vec::new();
    for rel in &csvs {
        let a = std::fs::read(d.root.join(rel)).map_err(err)?;
        let b = std::fs::read(fresh.path().join(rel)).unwrap_or_default();
        if a != b {
            differing.push(rel.as_str());
        }
    }
    Ok((
        differing.is_empty() && !csvs.is_empty(),
        format!(
            "{} CSV files replayed from the manifest, {} differ{}",
            csvs.len(),
            differing.len(),
            differing.first().map(|p| format!(" (first: {p})")).unwrap_or_default()
        ),
    ))
}

// ---------------------------------------------------------------- 6

/// Two-means on normalized power vectors, seeded with the two points
/// farthest apart.
fn two_means(points: &[Vec<f64>]) -> [Vec<f64>; 2] {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut best = (0, 0, -1.0);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = d2(&points[i], &points[j]);
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    let mut c = [points[best.0].clone(), points[best.1].clone()];
    for _ in 0..50 {
        let mut sums = [vec![0.0; c[0].len()], vec![0.0; c[0].len()]];
        let mut counts = [0usize; 2];
        for p in points {
            let k = usize::from(d2(p, &c[1]) < d2(p, &c[0]));
            sums[k].iter_mut().zip(p).for_each(|(s, v)| *s += v);
            counts[k] += 1;
        }
        for k in 0..2 {
            if counts[k] > 0 {
                c[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
    }
    c
}

fn assign(points: &[Vec<f64>], c: &[Vec<f64>; 2]) -> ([f64; 2], [Vec<f64>; 2]) {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut counts = [0.0f64; 2];
    let mut sums = [vec![0.0; c[0].len()], vec![0.0; c[0].len()]];
    for p in points {
        let k = usize::from(d2(p, &c[1]) < d2(p, &c[0]));
        counts[k] += 1.0;
        sums[k].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    let means = [0, 1].map(|k| sums[k].iter().map(|s| s / counts[k].max(1.0)).collect());
    let total = points.len() as f64;
    ([counts[0] / total, counts[1] / total], means)
}

fn criterion_6() -> Outcome {
    let physical = PhysicalConfig {
        shadowing_sigma_db: 0.0,
        ..PhysicalConfig::default()
    };
    // Each receiver sits as close to the other transmitter as to its own.
    let state = NetworkState::from_geometry(
        vec![[100.0, 100.0], [160.0, 100.0]],
        vec![[130.0, 110.0], [130.0, 90.0]],
        300.0,
        physical,
        6,
    )
    .map_err(err)?;
    let p_max = state.config.p_max_mw;
    let solo = solo_rates(&state, 4000);
    let f_min = 0.45 * solo[0].min(solo[1]);
    let run = run_expert(&state, "pair", f_min, &desk_expert(), 6).map_err(err)?;
    let expert: Vec<Vec<f64>> = run.dataset.samples.iter().map(|x| x.powers_mw.iter().map(|p| p / p_max).collect()).collect();
    let centers = two_means(&expert);
    let (exp_share, _) = assign(&expert, &centers);

    // Fitted on this network alone the log-gain range is empty and every
    // edge weight collapses to zero; fit on a desk-scale population instead.
    let mut population = vec![state.clone()];
    for s in 0..4 {
        population.push(generate_network(20, side_for_density(20, 11.9), &PhysicalConfig::default(), 600 + s).map_err(err)?);
    }
    let norm = EdgeNormalization::fit(population.iter()).map_err(err)?;
    let stats = FeatureStats::fit(&run.dataset.node_features).map_err(err)?;
    let arch = DenoiserConfig {
        depth: 2,
        ..DenoiserConfig::desk()
    };
    let set = ElementSet::build(&[(&run.dataset, &state)], &norm, &stats, arch.depth).map_err(err)?;
    let schedule_cfg = ScheduleConfig::default();
    let schedule = NoiseSchedule::from_config(&schedule_cfg).map_err(err)?;
    let mut model = DenoiserModel::<f32>::init(arch, 61).map_err(err)?;
    let tc = TrainConfig {
        max_epochs: 500,
        lr: 1e-3,
        patience: 500,
        seed: 62,
        ..TrainConfig::default()
    };
    let outcome = train_denoiser(&mut model, &set, &ElementSet::default(), &schedule, &tc).map_err(err)?;
    let best = DenoiserModel::from_params(model.config.clone(), outcome.best).map_err(err)?;
    let policy = TrainedPolicy::new(best, norm, stats, schedule_cfg).map_err(err)?;
    let samples = policy
        .sample(&state, "pair", f_min, 200, &SamplerConfig { seed: 63, ..SamplerConfig::default() })
        .map_err(err)?;
    let generated: Vec<Vec<f64>> = samples.iter().map(|x| x.powers_mw.iter().map(|p| p / p_max).collect()).collect();
    let (gen_share, gen_means) = assign(&generated, &centers);
    let center_gap = (0..2)
        .map(|k| centers[k].iter().zip(&gen_means[k]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let separation = centers[0].iter().zip(&centers[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let share_gap = (gen_share[0] - exp_share[0]).abs();
    let pass = separation >= 0.5 && gen_share.iter().all(|s| *s >= 0.1) && share_gap <= 0.15 && center_gap <= 0.25;
    let fmt = |c: &Vec<f64>| format!("({:.2},{:.2})", c[0], c[1]);
    Ok((
        pass,
        format!(
            "expert modes {} {} with shares {:.2}/{:.2}; generated shares {:.2}/{:.2} (gap {share_gap:.2} <= 0.15), mode offset {center_gap:.2} (<= 0.25)",
            fmt(&centers[0]),
            fmt(&centers[1]),
            exp_share[0],
            exp_share[1],
            gen_share[0],
            gen_share[1]
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn permuted_state(state: &NetworkState, perm: &[usize]) -> NetworkState {
    let mut s = state.clone();
    s.gain_matrix = state.gain_matrix.permute_symmetric(perm);
    s.tx_positions = perm.iter().map(|&p| state.tx_positions[p]).collect();
    s.rx_positions = perm.iter().map(|&p| state.rx_positions[p]).collect();
    s
}

fn criterion_7() -> Outcome {
    let state = generate_network(20, 1297.0, &PhysicalConfig::default(), 7).map_err(err)?;
    let norm = EdgeNormalization::fit([&state]).map_err(err)?;
    let raw = state.node_features(0.6);
    let stats = FeatureStats::fit(&raw).map_err(err)?;
    let model = DenoiserModel::<f32>::init(DenoiserConfig::desk(), 71).map_err(err)?;
    let op = build_operator(&state, &norm, model.config.depth).map_err(err)?;
    let u = stats.normalize(&raw);
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
        let k = rng.gen_range(1..=500);
        let base = model.denoise(&x, k, &op, &u).map_err(err)?;
        let mut perm: Vec<usize> = (0..20).collect();
        perm.shuffle(&mut rng);
        let ps = permuted_state(&state, &perm);
        let pop = build_operator(&ps, &norm, model.config.depth).map_err(err)?;
        let px: Vec<f64> = perm.iter().map(|&p| x[p]).collect();
        let pu: Vec<[f64; 3]> = stats.normalize(&ps.node_features(0.6));
        let out = model.denoise(&px, k, &pop, &pu).map_err(err)?;
        for (i, &p) in perm.iter().enumerate() {
            worst = worst.max((out[i] - base[p]).abs());
        }
    }
    Ok((worst < 1e-5, format!("max deviation over 50 permutations {worst:.2e} (< 1e-5, 32-bit)")))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = ExperimentConfig::default()
        .with_overrides(&[
            "f_min_grid=[0.4, 0.6, 0.8]",
            "sweep.qos_grid=[0.4, 0.5, 0.6, 0.7, 0.8]",
            "eval.t_slots=1000",
        ])
        .map_err(err)?;
    let cmds = [
        Command::GenerateNetworks { out: None },
        Command::RunExpert {
            networks: None,
            f_min_grid: None,
            out: None,
        },
        Command::Train {
            networks: None,
            datasets: None,
            out_model: None,
        },
        Command::Sweep {
            mode: cli::ModeArg::Qos,
            model: None,
            networks: None,
            out: None,
        },
    ];
    for c in &cmds {
        cli::execute(dir.path(), &cfg, c).map_err(err)?;
    }
    let p5 = pooled_p5(&read_csv(&dir.path().join("sweeps").join("qos.csv"))?, "f_min");
    let mut pass = true;
    let mut notes = Vec::new();
    for dens in densities(&p5) {
        let get = |k: i64| p5.get(&(dens, k)).copied().ok_or(format!("no pooled row at f_min {}", k as f64 / 10.0));
        for mid in [5, 7] {
            let (a, b, m) = (get(mid - 1)?, get(mid + 1)?, get(mid)?);
            let miss = (a.min(b) - 0.05 - m).max(m - a.max(b) - 0.05).max(0.0);
            pass &= miss == 0.0;
            notes.push(format!(
                "{:.1}/km2 f_min 0.{mid}: {m:.3} between {a:.3} and {b:.3} (outside by {miss:.3})",
                dens as f64 / 100.0
            ));
        }
    }
    Ok((pass, format!("{} (band 0.05)", notes.join(", "))))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient correctness", criterion_1),
        (2, "expert feasibility", criterion_2),
        (3, "expert near-optimality", criterion_3),
        (4, "diffusion correctness", criterion_4),
        (6, "multimodality", criterion_6),
        (7, "permutation equivariance", criterion_7),
        (5, "imitation quality", criterion_5),
        (8, "size transfer", criterion_8),
        (10, "reproducibility", criterion_10),
        (9, "QoS generalization", criterion_9),
    ];
    let only: Option<Vec<usize>> = std::env::var("DIFFALLOC_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {name}: {} | {detail} | {:.1}s",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
