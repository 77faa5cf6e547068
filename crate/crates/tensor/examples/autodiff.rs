//! Reverse-mode gradients of a two-layer network on a small graph, with one
//! AdamW step.

use std::sync::Arc;

use diffalloc_tensor::{AdamW, AdamWConfig, Csr, ParamSet, Tape, Tensor};

fn main() -> Result<(), diffalloc_tensor::TensorError> {
    let mut params = ParamSet::<f64>::new();
    let w1 = params.add("w1", Tensor::from_fn(2, 4, |i, j| 0.3 * (i as f64 - j as f64)));
    let w2 = params.add("w2", Tensor::from_fn(4, 1, |i, _| 0.1 * i as f64));
    // Path graph on three nodes with self loops.
    let shift = Arc::new(Csr::from_triplets(
        3,
        3,
        vec![(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.3), (1, 1, 0.4), (1, 2, 0.3), (2, 1, 0.5), (2, 2, 0.5)],
    )?);
    let x = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0]);
    let y = Tensor::matrix(3, 1, vec![1.0, 0.0, -1.0]);

    let mut opt = AdamW::new(AdamWConfig { lr: 0.05, ..AdamWConfig::default() });
    for step in 0..5 {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let h = tape.spmm(shift.clone(), xv)?;
        let h = tape.matmul(h, b.var(w1))?;
        let h = tape.silu(h);
        let out = tape.matmul(h, b.var(w2))?;
        let target = tape.constant(y.clone());
        let loss = tape.mse_loss(out, target)?;
        println!("step {step}: loss {:.5}", tape.value(loss).item());
        let grads = params.collect_grads(&tape.backward(loss)?, &b);
        opt.step(&mut params, &grads);
    }
    Ok(())
}
