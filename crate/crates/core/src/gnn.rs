//! Interference-graph operators and the U-shaped graph denoiser.
//!
//! The shift operator is the symmetrically normalized, log-rescaled gain
//! matrix. A hierarchy of coarser operators is built by heavy-edge matching
//! so the denoiser can pool and unpool like an image U-Net, but over graphs
//! of any size.
//!
//! Batches of graphs are stacked along rows and every operator becomes a
//! block-diagonal sparse matrix, so a single tape covers the whole batch.

use std::sync::Arc;

use diffalloc_tensor::{Axis, Bound, Csr, ParamId, ParamSet, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::NetworkState;
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::rng::{stream_rng, TAG_INIT};

/// Log-domain clipping bounds for edge weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeNormalization {
    pub log_min: f64,
    pub log_max: f64,
}

impl EdgeNormalization {
    /// 1st and 99th percentiles of `log10 h_ij` (i ≠ j) over `states`.
    pub fn fit<'a>(states: impl IntoIterator<Item = &'a NetworkState>) -> Result<Self> {
        let mut logs = Vec::new();
        for s in states {
            let n = s.n_pairs;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        logs.push(s.gain_matrix.get(i, j).log10());
                    }
                }
            }
        }
        if logs.is_empty() {
            return Err(Error::Empty("EdgeNormalization::fit"));
        }
        let log_min = crate::eval::percentile(&logs, 1.0)?;
        let mut log_max = crate::eval::percentile(&logs, 99.0)?;
        if log_max <= log_min {
            log_max = log_min + 1.0;
        }
        Ok(Self { log_min, log_max })
    }

    pub fn weight(&self, gain: f64) -> f64 {
        ((gain.log10() - self.log_min) / (self.log_max - self.log_min)).clamp(0.0, 1.0)
    }
}

/// Standardization of the two log-gain node features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Default for FeatureStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }
}

impl FeatureStats {
    /// Fits on raw node features `(h_jj, Σ_{i≠j} h_ij, f_min)`.
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a [f64; 3]>) -> Result<Self> {
        let mut sums = [0.0; 2];
        let mut sq = [0.0; 2];
        let mut count = 0usize;
        for f in features {
            for c in 0..2 {
                let v = f[c].log10();
                sums[c] += v;
                sq[c] += v * v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Empty("FeatureStats::fit"));
        }
        let n = count as f64;
        let mut out = Self::default();
        for c in 0..2 {
            out.mean[c] = sums[c] / n;
            let var = (sq[c] / n - out.mean[c].powi(2)).max(0.0);
            out.std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(out)
    }

    /// Model input rows from raw features. `f_min` passes through unchanged.
    pub fn normalize(&self, raw: &[[f64; 3]]) -> Vec<[f64; 3]> {
        raw.iter()
            .map(|f| {
                [
                    (f[0].log10() - self.mean[0]) / self.std[0],
                    (f[1].log10() - self.mean[1]) / self.std[1],
                    f[2],
                ]
            })
            .collect()
    }
}

/// One coarsening step: fine node `i` belongs to coarse node `assign[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Coarsening {
    pub assign: Vec<usize>,
    pub n_coarse: usize,
}

impl Coarsening {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_coarse];
        for &a in &self.assign {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Shift operators for every level plus the maps between them.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphOperator {
    /// `shifts[0]` is the full-resolution `S`.
    pub shifts: Vec<Matrix>,
    /// `coarsening_maps[l]` maps level `l` to level `l + 1`.
    pub coarsening_maps: Vec<Coarsening>,
}

impl GraphOperator {
    pub fn n(&self) -> usize {
        self.shifts[0].rows()
    }

    pub fn depth(&self) -> usize {
        self.shifts.len()
    }

    pub fn shift_matrix(&self) -> &Matrix {
        &self.shifts[0]
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    ///
    /// The hierarchy is frozen: coarse levels keep their labels and only the
    /// finest assignment is permuted.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        check_permutation(perm, n)?;
        let mut out = self.clone();
        out.shifts[0] = self.shifts[0].permute_symmetric(perm);
        if let Some(first) = out.coarsening_maps.first_mut() {
            first.assign = perm.iter().map(|&p| self.coarsening_maps[0].assign[p]).collect();
        }
        Ok(out)
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(invalid("not a permutation"));
    }
    Ok(())
}

/// `D^{-1/2} A D^{-1/2}`; zero-degree nodes get a unit self-weight first.
pub fn normalize_adjacency(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut a = a.clone();
    for i in 0..n {
        if a.row(i).iter().sum::<f64>() <= 0.0 {
            a.set(i, i, 1.0);
        }
    }
    let d: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum::<f64>().sqrt().recip()).collect();
    Matrix::from_fn(n, n, |i, j| d[i] * a.get(i, j) * d[j])
}

/// Symmetric off-diagonal edge weights from log-rescaled gains.
pub fn interference_adjacency(state: &NetworkState, norm: &EdgeNormalization) -> Matrix {
    let n = state.n_pairs;
    let h = &state.gain_matrix;
    Matrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            0.5 * (norm.weight(h.get(i, j)) + norm.weight(h.get(j, i)))
        }
    })
}

/// Greedy heavy-edge matching into clusters of at most two nodes.
///
/// Nodes are visited by ascending weighted degree, ties by index. Each
/// unmatched node pairs with its heaviest unmatched neighbour (ties by the
/// same order). Coarse labels follow visiting order.
pub fn heavy_edge_matching(a: &Matrix) -> Coarsening {
    let n = a.rows();
    let degree: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| a.get(i, j)).sum())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| degree[x].total_cmp(&degree[y]).then(x.cmp(&y)));
    let mut rank = vec![0; n];
    for (r, &v) in order.iter().enumerate() {
        rank[v] = r;
    }
    const UNSET: usize = usize::MAX;
    let mut assign = vec![UNSET; n];
    let mut next = 0;
    for &u in &order {
        if assign[u] != UNSET {
            continue;
        }
        let mut best: Option<usize> = None;
        for v in 0..n {
            if v == u || assign[v] != UNSET || a.get(u, v) <= 0.0 {
                continue;
            }
            best = match best {
                Some(b) if a.get(u, b) > a.get(u, v) || (a.get(u, b) == a.get(u, v) && rank[b] < rank[v]) => Some(b),
                _ => Some(v),
            };
        }
        assign[u] = next;
        if let Some(v) = best {
            assign[v] = next;
        }
        next += 1;
    }
    Coarsening {
        assign,
        n_coarse: next,
    }
}

/// Cluster-sum adjacency `Pᵀ A P`.
pub fn coarsen_adjacency(a: &Matrix, c: &Coarsening) -> Matrix {
    let mut out = Matrix::zeros(c.n_coarse, c.n_coarse);
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let (ci, cj) = (c.assign[i], c.assign[j]);
            out.set(ci, cj, out.get(ci, cj) + a.get(i, j));
        }
    }
    out
}

/// Builds `depth` levels from a symmetric nonnegative adjacency.
pub fn operator_from_adjacency(a: &Matrix, depth: usize) -> Result<GraphOperator> {
    let n = a.rows();
    if n == 0 || a.cols() != n {
        return Err(invalid("adjacency must be square and nonempty"));
    }
    if depth == 0 {
        return Err(invalid("depth must be at least 1"));
    }
    if a.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(invalid("adjacency entries must be finite and nonnegative"));
    }
    let mut shifts = vec![normalize_adjacency(a)];
    let mut maps = Vec::new();
    let mut current = a.clone();
    for _ in 1..depth {
        let c = heavy_edge_matching(&current);
        current = coarsen_adjacency(&current, &c);
        shifts.push(normalize_adjacency(&current));
        maps.push(c);
    }
    Ok(GraphOperator {
        shifts,
        coarsening_maps: maps,
    })
}

pub fn build_operator(state: &NetworkState, norm: &EdgeNormalization, depth: usize) -> Result<GraphOperator> {
    operator_from_adjacency(&interference_adjacency(state, norm), depth)
}

fn to_csr<T: Scalar>(m: &Matrix) -> Csr<T> {
    let data: Vec<T> = m.data().iter().map(|&v| T::of(v)).collect();
    Csr::from_dense(m.rows(), m.cols(), &data)
}

/// Row-stacked batch of graphs sharing one depth.
#[derive(Clone, Debug)]
pub struct GraphBatch<T> {
    pub levels: Vec<LevelBatch<T>>,
    pub n_graphs: usize,
}

#[derive(Clone, Debug)]
pub struct LevelBatch<T> {
    pub shift: Arc<Csr<T>>,
    /// Cluster-mean pooling into the next level.
    pub pool: Option<Arc<Csr<T>>>,
    /// Row in the next level that each row here belongs to.
    pub unpool: Option<Arc<[usize]>>,
    /// Graph index of every row.
    pub graph_of_row: Arc<[usize]>,
}

impl<T: Scalar> GraphBatch<T> {
    pub fn new(ops: &[&GraphOperator]) -> Result<Self> {
        let depth = ops.first().ok_or(Error::Empty("GraphBatch"))?.depth();
        if ops.iter().any(|o| o.depth() != depth) {
            return Err(invalid("all operators in a batch need the same depth"));
        }
        let mut levels = Vec::with_capacity(depth);
        for l in 0..depth {
            let blocks: Vec<Csr<T>> = ops.iter().map(|o| to_csr(&o.shifts[l])).collect();
            let refs: Vec<&Csr<T>> = blocks.iter().collect();
            let shift = Arc::new(Csr::block_diag(&refs));
            let graph_of_row: Arc<[usize]> = ops
                .iter()
                .enumerate()
                .flat_map(|(g, o)| std::iter::repeat_n(g, o.shifts[l].rows()))
                .collect();
            let (pool, unpool) = if l + 1 < depth {
                let mut trip = Vec::new();
                let mut index = Vec::new();
                let (mut fine_off, mut coarse_off) = (0, 0);
                for o in ops {
                    let c = &o.coarsening_maps[l];
                    let sizes = c.cluster_sizes();
                    for (i, &a) in c.assign.iter().enumerate() {
                        trip.push((coarse_off + a, fine_off + i, T::of(1.0 / sizes[a] as f64)));
                        index.push(coarse_off + a);
                    }
                    fine_off += c.assign.len();
                    coarse_off += c.n_coarse;
                }
                let pool = Csr::from_triplets(coarse_off, fine_off, trip)?;
                (Some(Arc::new(pool)), Some(index.into()))
            } else {
                (None, None)
            };
            levels.push(LevelBatch {
                shift,
                pool,
                unpool,
                graph_of_row,
            });
        }
        Ok(Self {
            levels,
            n_graphs: ops.len(),
        })
    }

    pub fn rows(&self) -> usize {
        self.levels[0].shift.rows()
    }
}

/// `act(Σ_t Sᵗ X W_t + b)` with the taps stacked as one
/// `((hops+1)·C_in) × C_out` weight.
pub fn graph_filter_layer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    shift: &Arc<Csr<T>>,
    weight: Var,
    bias: Var,
    hops: usize,
    activate: bool,
) -> Result<Var> {
    let pre = filter_pre_activation(tape, x, shift, weight, bias, hops)?;
    Ok(if activate { tape.silu(pre) } else { pre })
}

fn filter_pre_activation<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    shift: &Arc<Csr<T>>,
    weight: Var,
    bias: Var,
    hops: usize,
) -> Result<Var> {
    let mut taps = vec![x];
    for _ in 0..hops {
        let last = *taps.last().unwrap();
        taps.push(tape.spmm(shift.clone(), last)?);
    }
    let stacked = if hops == 0 { x } else { tape.concat(&taps, Axis::Cols)? };
    let y = tape.matmul(stacked, weight)?;
    let rows = tape.shape(y)[0];
    let b = tape.broadcast_rows(bias, rows)?;
    Ok(tape.add(y, b)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub depth: usize,
    pub layers_per_block: usize,
    pub channels: usize,
    pub filter_hops: usize,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            layers_per_block: 2,
            channels: 64,
            filter_hops: 2,
            time_embed_dim: 128,
            cond_embed_dim: 128,
        }
    }
}

impl DenoiserConfig {
    /// Reduced widths for single-core runs.
    pub fn desk() -> Self {
        Self {
            channels: 32,
            time_embed_dim: 64,
            cond_embed_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.layers_per_block == 0 || self.channels == 0 {
            return Err(invalid("depth, layers_per_block and channels must be positive"));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) || self.cond_embed_dim == 0 {
            return Err(invalid("time_embed_dim must be even and at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    layers: Vec<(ParamId, ParamId)>,
    time_proj: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    cond: (ParamId, ParamId),
    time1: (ParamId, ParamId),
    time2: (ParamId, ParamId),
    /// Encoder blocks (one per level, last is the bottleneck) then decoders
    /// from the coarsest skip upward.
    blocks: Vec<BlockIds>,
    head: (ParamId, ParamId),
}

/// U-GNN noise predictor: parameters plus architecture.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T> {
    pub config: DenoiserConfig,
    pub params: ParamSet<T>,
    layout: Layout,
}

/// Sinusoidal embedding of integer step `k`.
pub fn time_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (k as f64 * freq).sin();
        out[half + i] = (k as f64 * freq).cos();
    }
    out
}

fn param_names(config: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let c = config.channels;
    let hops = config.filter_hops + 1;
    let te = config.time_embed_dim;
    let mut v = vec![
        ("cond.w".to_string(), vec![3, config.cond_embed_dim]),
        ("cond.b".to_string(), vec![1, config.cond_embed_dim]),
        ("time1.w".to_string(), vec![te, te]),
        ("time1.b".to_string(), vec![1, te]),
        ("time2.w".to_string(), vec![te, te]),
        ("time2.b".to_string(), vec![1, te]),
    ];
    let block = |name: String, c_in: usize, v: &mut Vec<(String, Vec<usize>)>| {
        for l in 0..config.layers_per_block {
            let fan_in = if l == 0 { c_in } else { c };
            v.push((format!("{name}.l{l}.w"), vec![hops * fan_in, c]));
            v.push((format!("{name}.l{l}.b"), vec![1, c]));
        }
        v.push((format!("{name}.time"), vec![te, c]));
    };
    for l in 0..config.depth {
        let c_in = if l == 0 { 1 + config.cond_embed_dim } else { c };
        block(format!("enc{l}"), c_in, &mut v);
    }
    for l in (0..config.depth - 1).rev() {
        block(format!("dec{l}"), 2 * c, &mut v);
    }
    v.push(("head.w".to_string(), vec![c, 1]));
    v.push(("head.b".to_string(), vec![1, 1]));
    v
}

impl<T: Scalar> DenoiserModel<T> {
    /// Random init: weights `N(0, 1/fan_in)`, biases zero.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, &[TAG_INIT]);
        let mut params = ParamSet::new();
        for (name, shape) in param_names(&config) {
            let (r, c) = (shape[0], shape[1]);
            let t = if name.ends_with(".b") {
                Tensor::zeros(r, c)
            } else {
                let s = (1.0 / r as f64).sqrt();
                Tensor::from_fn(r, c, |_, _| T::of(s * rng.sample::<f64, _>(StandardNormal)))
            };
            params.add(name, t);
        }
        Self::from_params(config, params)
    }

    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in param_names(&config) {
            params.add(name, Tensor::zeros(shape[0], shape[1]));
        }
        Self::from_params(config, params)
    }

    /// Checks names and shapes against `config`.
    pub fn from_params(config: DenoiserConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = param_names(&config);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, architecture needs {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let id = params
                .find(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
        }
        let id = |n: &str| params.find(n).unwrap();
        let pair = |p: &str| (id(&format!("{p}.w")), id(&format!("{p}.b")));
        let block = |p: String| BlockIds {
            layers: (0..config.layers_per_block)
                .map(|l| pair(&format!("{p}.l{l}")))
                .collect(),
            time_proj: id(&format!("{p}.time")),
        };
        let mut blocks: Vec<BlockIds> = (0..config.depth).map(|l| block(format!("enc{l}"))).collect();
        blocks.extend((0..config.depth - 1).rev().map(|l| block(format!("dec{l}"))));
        let layout = Layout {
            cond: pair("cond"),
            time1: pair("time1"),
            time2: pair("time2"),
            blocks,
            head: pair("head"),
        };
        Ok(Self { config, params, layout })
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserModel<U> {
        DenoiserModel::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    fn linear(tape: &mut Tape<T>, b: &Bound, x: Var, (w, bias): (ParamId, ParamId)) -> Result<Var> {
        let y = tape.matmul(x, b.var(w))?;
        let rows = tape.shape(y)[0];
        let bb = tape.broadcast_rows(b.var(bias), rows)?;
        Ok(tape.add(y, bb)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        ids: &BlockIds,
        x: Var,
        level: &LevelBatch<T>,
        temb: Var,
    ) -> Result<Var> {
        // Per-graph time projection gathered onto rows.
        let tp = tape.matmul(temb, b.var(ids.time_proj))?;
        let tp = tape.gather_rows(tp, level.graph_of_row.clone())?;
        let mut h = x;
        for (l, &(w, bias)) in ids.layers.iter().enumerate() {
            let mut pre = filter_pre_activation(tape, h, &level.shift, b.var(w), b.var(bias), self.config.filter_hops)?;
            if l == 0 {
                pre = tape.add(pre, tp)?;
            }
            let normed = tape.layer_norm(pre, T::of(1e-5))?;
            h = tape.silu(normed);
        }
        Ok(h)
    }

    /// Predicted noise for a stacked batch. `x_k` and `u` are row-aligned
    /// with level 0 of `batch`; `steps[g]` is the diffusion step of graph `g`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        batch: &GraphBatch<T>,
        x_k: Var,
        u: Var,
        steps: &[usize],
    ) -> Result<Var> {
        let depth = self.config.depth;
        if batch.levels.len() != depth {
            return Err(invalid(format!(
                "operator depth {} does not match model depth {depth}",
                batch.levels.len()
            )));
        }
        if steps.len() != batch.n_graphs {
            return Err(Error::DimensionMismatch {
                op: "denoise steps",
                expected: batch.n_graphs,
                got: steps.len(),
            });
        }
        let te = self.config.time_embed_dim;
        let mut sin = Vec::with_capacity(steps.len() * te);
        for &k in steps {
            sin.extend(time_embedding(k, te).into_iter().map(T::of));
        }
        let sin = tape.constant(Tensor::matrix(steps.len(), te, sin));
        let t1 = Self::linear(tape, b, sin, self.layout.time1)?;
        let t1 = tape.silu(t1);
        let temb = Self::linear(tape, b, t1, self.layout.time2)?;
        let temb = tape.silu(temb);

        let ue = Self::linear(tape, b, u, self.layout.cond)?;
        let ue = tape.silu(ue);
        let mut h = tape.concat(&[x_k, ue], Axis::Cols)?;

        let mut skips = Vec::with_capacity(depth);
        for l in 0..depth {
            if l > 0 {
                let pool = batch.levels[l - 1].pool.clone().expect("pool between levels");
                h = tape.spmm(pool, h)?;
            }
            h = self.block(tape, b, &self.layout.blocks[l], h, &batch.levels[l], temb)?;
            skips.push(h);
        }
        skips.pop();
        for (i, l) in (0..depth - 1).rev().enumerate() {
            let index = batch.levels[l].unpool.clone().expect("unpool between levels");
            let up = tape.gather_rows(h, index)?;
            let cat = tape.concat(&[up, skips[l]], Axis::Cols)?;
            h = self.block(tape, b, &self.layout.blocks[depth + i], cat, &batch.levels[l], temb)?;
        }
        Self::linear(tape, b, h, self.layout.head)
    }

    /// Single-graph inference convenience. `u` holds normalized features.
    pub fn denoise(&self, x_k: &[f64], k: usize, op: &GraphOperator, u: &[[f64; 3]]) -> Result<Vec<f64>> {
        let batch = GraphBatch::new(&[op])?;
        self.denoise_batch(x_k, &[k], &batch, u)
    }

    /// Forward-only pass over a prepared batch.
    pub fn denoise_batch(&self, x_k: &[f64], steps: &[usize], batch: &GraphBatch<T>, u: &[[f64; 3]]) -> Result<Vec<f64>> {
        let rows = batch.rows();
        if x_k.len() != rows || u.len() != rows {
            return Err(Error::DimensionMismatch {
                op: "denoise",
                expected: rows,
                got: x_k.len().min(u.len()),
            });
        }
        if x_k.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite denoiser input"));
        }
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(Tensor::matrix(rows, 1, x_k.iter().map(|&v| T::of(v)).collect()));
        let uv = tape.constant(Tensor::matrix(rows, 3, u.iter().flatten().map(|&v| T::of(v)).collect()));
        let out = self.forward(&mut tape, &b, batch, xv, uv, steps)?;
        Ok(tape.value(out).data().iter().map(|v| v.as_f64()).collect())
    }
}

/// Shallow GNN for the parametrized primal: three filter layers and a
/// sigmoid output scaled to `[0, p_max]`.
#[derive(Clone, Debug)]
pub struct PrimalGnn {
    pub params: ParamSet<f64>,
    pub hops: usize,
}

impl PrimalGnn {
    pub fn init(channels: usize, hops: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, &[TAG_INIT, 1]);
        let mut params = ParamSet::new();
        let dims = [3, channels, channels, 1];
        for l in 0..3 {
            let fan_in = (hops + 1) * dims[l];
            let s = (1.0 / fan_in as f64).sqrt();
            params.add(
                format!("l{l}.w"),
                Tensor::from_fn(fan_in, dims[l + 1], |_, _| s * rng.sample::<f64, _>(StandardNormal)),
            );
            params.add(format!("l{l}.b"), Tensor::zeros(1, dims[l + 1]));
        }
        Self { params, hops }
    }

    /// Returns the allocation var (N × 1) in mW.
    pub fn forward(&self, tape: &mut Tape<f64>, b: &Bound, shift: &Arc<Csr<f64>>, u: Var, p_max: f64) -> Result<Var> {
        let mut h = u;
        for l in 0..3 {
            h = graph_filter_layer(tape, h, shift, b[ParamId(2 * l)], b[ParamId(2 * l + 1)], self.hops, l < 2)?;
        }
        let s = tape.sigmoid(h);
        Ok(tape.scale(s, p_max))
    }
}
