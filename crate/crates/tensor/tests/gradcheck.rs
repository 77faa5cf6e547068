//! Randomized central-difference checks for every primitive's backward rule.
//!
//! Each check builds a scalar function of one input on a fresh tape,
//! contracts the op output with a fixed random weight so that every output
//! entry matters, and compares the tape gradient with central differences
//! computed by re-running the forward pass.

use std::sync::Arc;

use diffalloc_tensor::{Axis, Csr, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 100;
const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
}

/// Away from zero by at least 0.05 so kinks (relu) are never straddled.
fn random_away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| {
        let m = rng.gen_range(0.05..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// `op` maps (tape, input var) to an output var of any shape.
fn check<F>(name: &str, input: &Tensor<f64>, weight_seed: u64, op: F)
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let eval = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>, Tensor<f64>) {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let out = op(&mut tape, xv);
        let shape = tape.shape(out).to_vec();
        let mut wr = ChaCha8Rng::seed_from_u64(weight_seed);
        let w = Tensor::new(
            shape.clone(),
            (0..shape.iter().product::<usize>()).map(|_| wr.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let wv = tape.constant(w.clone());
        let p = tape.mul(out, wv).unwrap();
        let s = tape.sum(p);
        let val = tape.value(s).item();
        let g = tape.backward(s).unwrap();
        (val, g.get(xv).cloned(), w)
    };
    let (_, grad, _) = eval(input);
    let grad = grad.unwrap_or_else(|| Tensor::new(input.shape().to_vec(), vec![0.0; input.numel()]).unwrap());
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = input.clone();
        minus.data_mut()[i] -= STEP;
        let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * STEP);
        let an = grad.data()[i];
        assert!(
            rel_err(an, fd) < TOL,
            "{name}: entry {i} analytic {an} vs finite difference {fd}"
        );
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5))
}

#[test]
fn matmul_backward_2x3_by_3x1() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, 2, 3);
    let b = random(&mut rng, 3, 1);
    let bc = b.clone();
    check("matmul lhs", &a, 1, move |t, x| {
        let bv = t.constant(bc.clone());
        t.matmul(x, bv).unwrap()
    });
    check("matmul rhs", &b, 2, move |t, x| {
        let av = t.constant(a.clone());
        t.matmul(av, x).unwrap()
    });
}

#[test]
fn matmul_randomized() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..TRIALS {
        let (m, k) = dims(&mut rng);
        let n = rng.gen_range(1..5);
        let a = random(&mut rng, m, k);
        let b = random(&mut rng, k, n);
        let bc = b.clone();
        check("matmul lhs", &a, trial as u64, move |t, x| {
            let bv = t.constant(bc.clone());
            t.matmul(x, bv).unwrap()
        });
        let ac = a.clone();
        check("matmul rhs", &b, trial as u64, move |t, x| {
            let av = t.constant(ac.clone());
            t.matmul(av, x).unwrap()
        });
    }
}

#[test]
fn elementwise_binary_randomized() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..TRIALS {
        let (r, c) = dims(&mut rng);
        let x = random(&mut rng, r, c);
        let other = random(&mut rng, r, c);
        let o = other.clone();
        check("add", &x, trial as u64, move |t, v| {
            let ov = t.constant(o.clone());
            t.add(v, ov).unwrap()
        });
        let o = other.clone();
        check("sub rhs", &x, trial as u64, move |t, v| {
            let ov = t.constant(o.clone());
            t.sub(ov, v).unwrap()
        });
        let o = other.clone();
        check("mul", &x, trial as u64, move |t, v| {
            let ov = t.constant(o.clone());
            t.mul(v, ov).unwrap()
        });
        check("mul self", &x, trial as u64, |t, v| t.mul(v, v).unwrap());
    }
}

#[test]
fn scalar_ops_and_reductions_randomized() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..TRIALS {
        let (r, c) = dims(&mut rng);
        let x = random(&mut rng, r, c);
        let k: f64 = rng.gen_range(-2.0..2.0);
        check("scale", &x, trial as u64, move |t, v| t.scale(v, k));
        check("add_scalar", &x, trial as u64, move |t, v| t.add_scalar(v, k));
        check("sum", &x, trial as u64, |t, v| t.sum(v));
        check("mean", &x, trial as u64, |t, v| t.mean(v));
    }
}

#[test]
fn activations_randomized() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for trial in 0..TRIALS {
        let (r, c) = dims(&mut rng);
        let x = random_away_from_zero(&mut rng, r, c);
        check("relu", &x, trial as u64, |t, v| t.relu(v));
        check("silu", &x, trial as u64, |t, v| t.silu(v));
        check("sigmoid", &x, trial as u64, |t, v| t.sigmoid(v));
    }
}

#[test]
fn layer_norm_randomized() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..TRIALS {
        let r = rng.gen_range(1..4);
        let c = rng.gen_range(2..6);
        let x = random(&mut rng, r, c);
        check("layer_norm", &x, trial as u64, |t, v| t.layer_norm(v, 1e-5).unwrap());
    }
}

#[test]
fn structural_ops_randomized() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for trial in 0..TRIALS {
        let (r, c) = dims(&mut rng);
        let x = random(&mut rng, r, c);
        let side = random(&mut rng, r, 2);
        let s = side.clone();
        check("concat cols", &x, trial as u64, move |t, v| {
            let sv = t.constant(s.clone());
            t.concat(&[sv, v, v], Axis::Cols).unwrap()
        });
        let below = random(&mut rng, 2, c);
        check("concat rows", &x, trial as u64, move |t, v| {
            let bv = t.constant(below.clone());
            t.concat(&[v, bv], Axis::Rows).unwrap()
        });
        let start = rng.gen_range(0..c);
        let len = rng.gen_range(1..=c - start);
        check("narrow cols", &x, trial as u64, move |t, v| t.narrow(v, Axis::Cols, start, len).unwrap());
        let rs = rng.gen_range(0..r);
        check("narrow rows", &x, trial as u64, move |t, v| t.narrow(v, Axis::Rows, rs, 1).unwrap());

        let row = random(&mut rng, 1, c);
        let reps = rng.gen_range(1..5);
        check("broadcast_rows", &row, trial as u64, move |t, v| t.broadcast_rows(v, reps).unwrap());

        let index: Arc<[usize]> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..r)).collect();
        check("gather_rows", &x, trial as u64, move |t, v| t.gather_rows(v, index.clone()).unwrap());

        let out_rows = rng.gen_range(1..5);
        let mut trip = Vec::new();
        for i in 0..out_rows {
            for j in 0..r {
                if rng.gen_bool(0.6) {
                    trip.push((i, j, rng.gen_range(-1.0..1.0)));
                }
            }
        }
        let op = Arc::new(Csr::from_triplets(out_rows, r, trip).unwrap());
        check("spmm", &x, trial as u64, move |t, v| t.spmm(op.clone(), v).unwrap());

        let target = random(&mut rng, r, c);
        let tc = target.clone();
        check("mse pred", &x, trial as u64, move |t, v| {
            let tv = t.constant(tc.clone());
            t.mse_loss(v, tv).unwrap()
        });
        check("mse target", &x, trial as u64, move |t, v| {
            let pv = t.constant(target.clone());
            t.mse_loss(pv, v).unwrap()
        });
    }
}

#[test]
fn accumulation_is_order_independent() {
    // Sum of the same three branches recorded in two different orders.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random(&mut rng, 3, 4);
    let w = random(&mut rng, 4, 2);
    let grad_for = |order: [usize; 3]| {
        let mut t = Tape::<f64>::new();
        let xv = t.param(x.clone());
        let wv = t.constant(w.clone());
        let mut terms = Vec::new();
        for &b in &order {
            let y = match b {
                0 => {
                    let m = t.matmul(xv, wv).unwrap();
                    t.sum(m)
                }
                1 => {
                    let s = t.silu(xv);
                    t.mean(s)
                }
                _ => {
                    let sq = t.mul(xv, xv).unwrap();
                    t.sum(sq)
                }
            };
            terms.push(y);
        }
        let a = t.add(terms[0], terms[1]).unwrap();
        let total = t.add(a, terms[2]).unwrap();
        t.backward(total).unwrap().get(xv).unwrap().clone()
    };
    let g1 = grad_for([0, 1, 2]);
    let g2 = grad_for([2, 0, 1]);
    for (a, b) in g1.data().iter().zip(g2.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn seeded_backward_is_a_vector_jacobian_product() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::matrix(2, 1, vec![0.3, -0.4]));
    let y = t.sigmoid(x);
    let g = t
        .backward_seeded(y, Tensor::matrix(2, 1, vec![2.0, -1.0]))
        .unwrap();
    let s = |v: f64| 1.0 / (1.0 + (-v).exp());
    let want = [2.0 * s(0.3) * (1.0 - s(0.3)), -s(-0.4) * (1.0 - s(-0.4))];
    for (a, b) in g.get(x).unwrap().data().iter().zip(want) {
        assert!((a - b).abs() < 1e-14);
    }
}
