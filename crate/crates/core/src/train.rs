//! Denoiser training on expert sample sets.
//!
//! Every expert sample becomes one training element: its allocation signal,
//! the graph operator of its network and the normalized node features. A
//! minibatch is split into fixed-size shards that run on separate tapes in
//! parallel; shard gradients are summed in shard order, so results do not
//! depend on the number of worker threads.

use std::collections::BTreeMap;
use std::io::Write;

use diffalloc_tensor::{sum_grads, AdamW, AdamWConfig, ParamSet, Tape, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::NetworkState;
use crate::diffusion::{draw_step_and_noise, noise_with, to_signal, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::expert::ExpertDataset;
use crate::gnn::{build_operator, DenoiserModel, EdgeNormalization, FeatureStats, GraphBatch, GraphOperator};
use crate::rng::{stream_rng, TAG_TRAIN, TAG_VALIDATION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Elements per optimizer step.
    pub batch_size: usize,
    /// Elements per parallel shard.
    pub shard_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    /// Fixed `(k, ε)` draws per validation element.
    pub val_draws: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            batch_size: 64,
            shard_size: 16,
            lr: 1e-4,
            weight_decay: 1e-2,
            patience: 50,
            val_draws: 4,
            seed: 0,
        }
    }
}

/// One allocation sample bound to its network.
#[derive(Clone, Debug)]
pub struct Element {
    pub op: usize,
    pub x0: Vec<f64>,
    pub u: Vec<[f64; 3]>,
}

/// Operators plus elements, ready for batching.
#[derive(Clone, Debug, Default)]
pub struct ElementSet {
    pub ops: Vec<GraphOperator>,
    pub elements: Vec<Element>,
}

impl ElementSet {
    /// Builds elements from `(dataset, network)` pairs. Datasets sharing a
    /// network id share one operator.
    pub fn build(
        sets: &[(&ExpertDataset, &NetworkState)],
        norm: &EdgeNormalization,
        stats: &FeatureStats,
        depth: usize,
    ) -> Result<Self> {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut out = ElementSet::default();
        for (data, state) in sets {
            if data.n() != state.n_pairs {
                return Err(Error::DimensionMismatch {
                    op: "training set",
                    expected: state.n_pairs,
                    got: data.n(),
                });
            }
            let op = match index.get(data.network_id.as_str()) {
                Some(&i) => i,
                None => {
                    out.ops.push(build_operator(state, norm, depth)?);
                    index.insert(&data.network_id, out.ops.len() - 1);
                    out.ops.len() - 1
                }
            };
            let u = stats.normalize(&data.node_features);
            let p_max = state.config.p_max_mw;
            for s in &data.samples {
                out.elements.push(Element {
                    op,
                    x0: to_signal(s, p_max),
                    u: u.clone(),
                });
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// Noised inputs for a list of elements with their own `(k, ε)`.
struct Prepared<T> {
    batch: GraphBatch<T>,
    x_k: Tensor<T>,
    u: Tensor<T>,
    eps: Tensor<T>,
    steps: Vec<usize>,
}

fn prepare<T: diffalloc_tensor::Scalar>(
    set: &ElementSet,
    idx: &[usize],
    draws: &[(usize, Vec<f64>)],
    schedule: &NoiseSchedule,
) -> Result<Prepared<T>> {
    let ops: Vec<&GraphOperator> = idx.iter().map(|&i| &set.ops[set.elements[i].op]).collect();
    let batch = GraphBatch::new(&ops)?;
    let rows = batch.rows();
    let mut x_k = Vec::with_capacity(rows);
    let mut u = Vec::with_capacity(rows * 3);
    let mut eps = Vec::with_capacity(rows);
    let mut steps = Vec::with_capacity(idx.len());
    for (&i, (k, e)) in idx.iter().zip(draws) {
        let el = &set.elements[i];
        x_k.extend(noise_with(&el.x0, schedule.alpha_bar(*k), e).into_iter().map(T::of));
        u.extend(el.u.iter().flatten().map(|&v| T::of(v)));
        eps.extend(e.iter().map(|&v| T::of(v)));
        steps.push(*k);
    }
    Ok(Prepared {
        batch,
        x_k: Tensor::matrix(rows, 1, x_k),
        u: Tensor::matrix(rows, 3, u),
        eps: Tensor::matrix(rows, 1, eps),
        steps,
    })
}

/// Loss and parameter gradients for one shard, with the loss weighted by
/// `weight` so that shard results sum to the batch mean.
fn shard_grads(
    model: &DenoiserModel<f32>,
    p: &Prepared<f32>,
    weight: f64,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let x = tape.constant(p.x_k.clone());
    let u = tape.constant(p.u.clone());
    let eps = tape.constant(p.eps.clone());
    let pred = model.forward(&mut tape, &b, &p.batch, x, u, &p.steps)?;
    let mse = tape.mse_loss(pred, eps)?;
    let loss = tape.scale(mse, weight as f32);
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    Ok((value, model.params.collect_grads(&grads, &b)))
}

/// Mean noise-prediction loss of `model` on fixed draws.
pub fn evaluate_loss(
    model: &DenoiserModel<f32>,
    set: &ElementSet,
    schedule: &NoiseSchedule,
    draws_per_element: usize,
    seed: u64,
    chunk: usize,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Empty("evaluate_loss"));
    }
    let mut items = Vec::new();
    for i in 0..set.len() {
        for d in 0..draws_per_element.max(1) {
            let mut rng = stream_rng(seed, &[TAG_VALIDATION, i as u64, d as u64]);
            items.push((i, draw_step_and_noise(&mut rng, schedule, set.elements[i].x0.len())));
        }
    }
    let chunks: Vec<&[(usize, (usize, Vec<f64>))]> = items.chunks(chunk.max(1)).collect();
    let parts: Vec<Result<(f64, usize)>> = chunks
        .par_iter()
        .map(|c| {
            let idx: Vec<usize> = c.iter().map(|(i, _)| *i).collect();
            let draws: Vec<(usize, Vec<f64>)> = c.iter().map(|(_, d)| d.clone()).collect();
            let p = prepare::<f32>(set, &idx, &draws, schedule)?;
            let mut tape = Tape::new();
            let b = model.params.bind_frozen(&mut tape);
            let x = tape.constant(p.x_k.clone());
            let u = tape.constant(p.u.clone());
            let pred = model.forward(&mut tape, &b, &p.batch, x, u, &p.steps)?;
            let sq: f64 = tape
                .value(pred)
                .data()
                .iter()
                .zip(p.eps.data())
                .map(|(a, e)| ((a - e) as f64).powi(2))
                .sum();
            Ok((sq, p.eps.numel()))
        })
        .collect();
    let (mut sq, mut count) = (0.0, 0usize);
    for p in parts {
        let (s, c) = p?;
        sq += s;
        count += c;
    }
    Ok(sq / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub best: ParamSet<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

pub fn write_loss_csv(w: &mut impl Write, log: &[EpochLog]) -> Result<()> {
    writeln!(w, "epoch,train_loss,val_loss")?;
    for e in log {
        writeln!(w, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
    }
    Ok(())
}

/// AdamW training with early stopping on validation loss.
///
/// With an empty validation set the training loss drives early stopping.
pub fn train_denoiser(
    model: &mut DenoiserModel<f32>,
    train: &ElementSet,
    val: &ElementSet,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if config.batch_size == 0 || config.shard_size == 0 {
        return Err(invalid("batch_size and shard_size must be positive"));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut best = model.params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.max_epochs {
        let mut rng = stream_rng(config.seed, &[TAG_TRAIN, epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let draws: Vec<(usize, Vec<f64>)> = batch
                .iter()
                .enumerate()
                .map(|(e, &i)| {
                    let mut r = stream_rng(config.seed, &[TAG_TRAIN, epoch as u64, bi as u64, e as u64]);
                    draw_step_and_noise(&mut r, schedule, train.elements[i].x0.len())
                })
                .collect();
            let total_rows: usize = batch.iter().map(|&i| train.elements[i].x0.len()).sum();
            let shards: Vec<(Vec<usize>, Vec<(usize, Vec<f64>)>)> = batch
                .chunks(config.shard_size)
                .zip(draws.chunks(config.shard_size))
                .map(|(i, d)| (i.to_vec(), d.to_vec()))
                .collect();
            let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> = shards
                .par_iter()
                .map(|(idx, d)| {
                    let p = prepare::<f32>(train, idx, d, schedule)?;
                    let rows = p.eps.numel();
                    shard_grads(model, &p, rows as f64 / total_rows as f64)
                })
                .collect();
            let mut grads = Vec::with_capacity(results.len());
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                grads.push(g);
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: "training loss".into(),
                    step: epoch,
                });
            }
            let g = sum_grads(grads).expect("at least one shard");
            opt.step(&mut model.params, &g);
            epoch_loss += loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            evaluate_loss(model, val, schedule, config.val_draws, config.seed, 64)?
        };
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best = model.params.clone();
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_network, PhysicalConfig};
    use crate::gnn::DenoiserConfig;
    use crate::rates::Allocation;

    fn toy() -> (NetworkState, ExpertDataset) {
        let state = generate_network(8, 400.0, &PhysicalConfig::default(), 4).unwrap();
        let samples = (0..16)
            .map(|s| Allocation::new((0..8).map(|j| if (j + s) % 2 == 0 { 10.0 } else { 0.0 }).collect()))
            .collect();
        let data = ExpertDataset {
            network_id: "toy".into(),
            node_features: state.node_features(0.6),
            samples,
            f_min: 0.6,
            burn_in: 0,
            step_size: 0.01,
        };
        (state, data)
    }

    #[test]
    fn loss_decreases_on_a_single_network() {
        let (state, data) = toy();
        let norm = EdgeNormalization::fit([&state]).unwrap();
        let stats = FeatureStats::fit(&data.node_features).unwrap();
        let config = DenoiserConfig { channels: 16, time_embed_dim: 16, cond_embed_dim: 16, ..DenoiserConfig::default() };
        let set = ElementSet::build(&[(&data, &state)], &norm, &stats, config.depth).unwrap();
        let schedule = NoiseSchedule::linear(500, 1e-4, 0.02).unwrap();
        let mut model = DenoiserModel::<f32>::init(config, 0).unwrap();
        let before = evaluate_loss(&model, &set, &schedule, 8, 3, 64).unwrap();
        // 200 optimizer steps: 16 elements in batches of 8, 100 epochs.
        let cfg = TrainConfig { max_epochs: 100, batch_size: 8, shard_size: 4, lr: 3e-3, weight_decay: 0.0, patience: 1000, ..TrainConfig::default() };
        let out = train_denoiser(&mut model, &set, &ElementSet::default(), &schedule, &cfg).unwrap();
        model.params = out.best;
        let after = evaluate_loss(&model, &set, &schedule, 8, 3, 64).unwrap();
        assert!(after < 0.8 * before, "{before} -> {after}");
    }

    #[test]
    fn shard_size_does_not_change_the_update() {
        let (state, data) = toy();
        let norm = EdgeNormalization::fit([&state]).unwrap();
        let stats = FeatureStats::fit(&data.node_features).unwrap();
        let config = DenoiserConfig { channels: 8, time_embed_dim: 8, cond_embed_dim: 8, ..DenoiserConfig::default() };
        let set = ElementSet::build(&[(&data, &state)], &norm, &stats, config.depth).unwrap();
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let run = |shard: usize| {
            let mut m = DenoiserModel::<f32>::init(config.clone(), 1).unwrap();
            let cfg = TrainConfig { max_epochs: 2, batch_size: 16, shard_size: shard, lr: 1e-3, ..TrainConfig::default() };
            train_denoiser(&mut m, &set, &ElementSet::default(), &schedule, &cfg).unwrap();
            m.params
        };
        let (a, b) = (run(4), run(16));
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() < 1e-5);
            }
        }
    }
}
