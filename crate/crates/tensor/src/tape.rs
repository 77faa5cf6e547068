//! Tape-based reverse-mode differentiation over dense rank-2 tensors.
//!
//! Every op appends a node holding its forward value and the indices of its
//! inputs. Nodes are appended in execution order, so the tape is already a
//! topological order of the computation and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.
//!
//! Broadcasting is deliberately narrow: scalar constants through
//! [`Tape::scale`] / [`Tape::add_scalar`], and row vectors through the
//! explicit [`Tape::broadcast_rows`]. Everything else requires matching
//! shapes.

use std::sync::Arc;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::sparse::Csr;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    BroadcastRows(usize),
    Concat { parts: Vec<usize>, axis: Axis },
    Narrow { src: usize, axis: Axis, start: usize },
    Relu(usize),
    Silu(usize),
    Sigmoid(usize),
    LayerNorm { src: usize, inv_std: Vec<T> },
    Sum(usize),
    Mean(usize),
    GatherRows { src: usize, index: Arc<[usize]> },
    SpMM { op: Arc<Csr<T>>, src: usize },
    Mse(usize, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass. Single-threaded; run one tape per worker.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn require_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(), TensorError> {
    if t.rank() == 2 {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        })
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), ta.data(), false, tb.data(), false, T::zero(), &mut out);
        let rg = self.grad_of(&[a.0, b.0]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a.0, b.0), rg))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        self.same_shape(op_name, a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.grad_of(&[a.0, b.0]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.grad_of(&[a.0]);
        self.push(out, Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.grad_of(&[a.0]);
        self.push(out, Op::AddScalar(a.0), rg)
    }

    /// Repeats a `1 x C` row vector `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.rank() != 2 || ta.rows() != 1 || rows == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![rows],
            });
        }
        let c = ta.cols();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(ta.data());
        }
        let rg = self.grad_of(&[a.0]);
        Ok(self.push(Tensor::matrix(rows, c, data), Op::BroadcastRows(a.0), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::InvalidShape(vec![]))?;
        let (r0, c0) = (self.value(first).rows(), self.value(first).cols());
        for &p in parts {
            let t = self.value(p);
            require_matrix("concat", t)?;
            let ok = match axis {
                Axis::Cols => t.rows() == r0,
                Axis::Rows => t.cols() == c0,
            };
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let out = match axis {
            Axis::Rows => {
                let rows = parts.iter().map(|&p| self.value(p).rows()).sum();
                let mut data = Vec::with_capacity(rows * c0);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(rows, c0, data)
            }
            Axis::Cols => {
                let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for &p in parts {
                        let t = self.value(p);
                        let c = t.cols();
                        data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                    }
                }
                Tensor::matrix(r0, cols, data)
            }
        };
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.grad_of(&idx);
        Ok(self.push(out, Op::Concat { parts: idx, axis }, rg))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        require_matrix("narrow", ta)?;
        let (r, c) = (ta.rows(), ta.cols());
        let extent = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if len == 0 || start + len > extent {
            return Err(TensorError::ShapeMismatch {
                op: "narrow",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = match axis {
            Axis::Rows => Tensor::matrix(len, c, ta.data()[start * c..(start + len) * c].to_vec()),
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * len);
                for row in 0..r {
                    data.extend_from_slice(&ta.data()[row * c + start..row * c + start + len]);
                }
                Tensor::matrix(r, len, data)
            }
        };
        let rg = self.grad_of(&[a.0]);
        Ok(self.push(out, Op::Narrow { src: a.0, axis, start }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.grad_of(&[a.0]);
        self.push(out, Op::Relu(a.0), rg)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.grad_of(&[a.0]);
        self.push(out, Op::Silu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.grad_of(&[a.0]);
        self.push(out, Op::Sigmoid(a.0), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var, TensorError> {
        let ta = self.value(a);
        require_matrix("layer_norm", ta)?;
        let (r, c) = (ta.rows(), ta.cols());
        let cf = T::of(c as f64);
        let mut data = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for row in ta.data().chunks_exact(c) {
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|&x| (x - mean) * is));
        }
        let rg = self.grad_of(&[a.0]);
        Ok(self.push(Tensor::matrix(r, c, data), Op::LayerNorm { src: a.0, inv_std }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.grad_of(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        let rg = self.grad_of(&[a.0]);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg)
    }

    /// Row `i` of the output is row `index[i]` of `a`. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var, TensorError> {
        let ta = self.value(a);
        require_matrix("gather_rows", ta)?;
        let (r, c) = (ta.rows(), ta.cols());
        if index.is_empty() {
            return Err(TensorError::InvalidShape(vec![0, c]));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(&ta.data()[i * c..(i + 1) * c]);
        }
        let rg = self.grad_of(&[a.0]);
        let out = Tensor::matrix(index.len(), c, data);
        Ok(self.push(out, Op::GatherRows { src: a.0, index }, rg))
    }

    /// `A X` with a constant sparse `A`.
    pub fn spmm(&mut self, op: Arc<Csr<T>>, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        require_matrix("spmm", tx)?;
        if op.cols() != tx.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                lhs: vec![op.rows(), op.cols()],
                rhs: tx.shape().to_vec(),
            });
        }
        let c = tx.cols();
        let out = Tensor::matrix(op.rows(), c, op.mul_dense(tx.data(), c));
        let rg = self.grad_of(&[x.0]);
        Ok(self.push(out, Op::SpMM { op, src: x.0 }, rg))
    }

    /// Mean over all entries of `(pred - target)^2`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        self.same_shape("mse_loss", pred, target)?;
        let (tp, tt) = (self.value(pred), self.value(target));
        let n = T::of(tp.numel() as f64);
        let s = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        let rg = self.grad_of(&[pred.0, target.0]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred.0, target.0), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let seed = Tensor::new(shape.to_vec(), vec![T::one()])?;
        self.backward_seeded(loss, seed)
    }

    /// Vector-Jacobian product: propagates an explicit output cotangent.
    pub fn backward_seeded(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>, TensorError> {
        if seed.shape() != self.shape(out) {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: self.shape(out).to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], idx: usize, contribution: Tensor<T>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let like = |idx: usize, data: Vec<T>| {
            Tensor::new(self.nodes[idx].value.shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[*a].requires_grad {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), false, tb.data(), true, T::zero(), &mut da);
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), ta.data(), true, g.data(), false, T::zero(), &mut db);
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, like(*a, d));
                }
                if self.nodes[*b].requires_grad {
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::BroadcastRows(a) => {
                let c = g.cols();
                let mut d = vec![T::zero(); c];
                for row in g.data().chunks_exact(c) {
                    for (acc, &x) in d.iter_mut().zip(row) {
                        *acc = *acc + x;
                    }
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Concat { parts, axis } => {
                let total_cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    let (r, c) = (t.rows(), t.cols());
                    if self.nodes[p].requires_grad {
                        let d = match axis {
                            Axis::Rows => g.data()[offset * c..(offset + r) * c].to_vec(),
                            Axis::Cols => {
                                let mut d = Vec::with_capacity(r * c);
                                for row in 0..r {
                                    let base = row * total_cols + offset;
                                    d.extend_from_slice(&g.data()[base..base + c]);
                                }
                                d
                            }
                        };
                        self.accumulate(grads, p, like(p, d));
                    }
                    offset += match axis {
                        Axis::Rows => r,
                        Axis::Cols => c,
                    };
                }
            }
            Op::Narrow { src, axis, start } => {
                let t = &self.nodes[*src].value;
                let (r, c) = (t.rows(), t.cols());
                let mut d = vec![T::zero(); r * c];
                match axis {
                    Axis::Rows => d[start * c..start * c + g.numel()].copy_from_slice(g.data()),
                    Axis::Cols => {
                        let len = g.cols();
                        for row in 0..r {
                            d[row * c + start..row * c + start + len]
                                .copy_from_slice(&g.data()[row * len..(row + 1) * len]);
                        }
                    }
                }
                self.accumulate(grads, *src, like(*src, d));
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gi, &xi)| {
                        let s = sigmoid(xi);
                        gi * s * (T::one() + xi * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::LayerNorm { src, inv_std } => {
                let y = &node.value;
                let c = y.cols();
                let cf = T::of(c as f64);
                let mut d = Vec::with_capacity(y.numel());
                for ((gr, yr), &is) in g
                    .data()
                    .chunks_exact(c)
                    .zip(y.data().chunks_exact(c))
                    .zip(inv_std)
                {
                    let gm = gr.iter().copied().sum::<T>() / cf;
                    let gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / cf;
                    d.extend(gr.iter().zip(yr).map(|(&gi, &yi)| is * (gi - gm - yi * gy)));
                }
                self.accumulate(grads, *src, like(*src, d));
            }
            Op::Sum(a) => {
                let gv = g.item();
                let n = self.nodes[*a].value.numel();
                self.accumulate(grads, *a, like(*a, vec![gv; n]));
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel();
                let gv = g.item() / T::of(n as f64);
                self.accumulate(grads, *a, like(*a, vec![gv; n]));
            }
            Op::GatherRows { src, index } => {
                let t = &self.nodes[*src].value;
                let c = t.cols();
                let mut d = vec![T::zero(); t.numel()];
                for (row, &i) in index.iter().enumerate() {
                    let dst = &mut d[i * c..(i + 1) * c];
                    for (acc, &x) in dst.iter_mut().zip(&g.data()[row * c..(row + 1) * c]) {
                        *acc = *acc + x;
                    }
                }
                self.accumulate(grads, *src, like(*src, d));
            }
            Op::SpMM { op, src } => {
                let d = op.transpose_mul_dense(g.data(), g.cols());
                self.accumulate(grads, *src, like(*src, d));
            }
            Op::Mse(p, t) => {
                let (tp, tt) = (&self.nodes[*p].value, &self.nodes[*t].value);
                let k = T::of(2.0) * g.item() / T::of(tp.numel() as f64);
                let d: Vec<T> = tp.data().iter().zip(tt.data()).map(|(&a, &b)| k * (a - b)).collect();
                if self.nodes[*t].requires_grad {
                    self.accumulate(grads, *t, like(*t, d.iter().map(|&x| -x).collect()));
                }
                self.accumulate(grads, *p, like(*p, d));
            }
        }
    }
}

/// Gradients produced by one reverse sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not influence the differentiated output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
