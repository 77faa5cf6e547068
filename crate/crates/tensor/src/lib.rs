//! Dense reverse-mode differentiation for small graph networks.
//!
//! A [`Tape`] records rank-2 tensor ops and replays them backwards to
//! produce [`Gradients`]. Graph structure enters only through constant
//! sparse left-multiplications ([`Csr`], [`Tape::spmm`]), so there is no
//! general broadcasting machinery. Training runs in `f32`; the same code
//! instantiated at `f64` is used for finite-difference checks.

mod checkpoint;
mod error;
mod optim;
mod params;
mod scalar;
mod sparse;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::TensorError;
pub use optim::{adamw_step, AdamW, AdamWConfig, AdamWState};
pub use params::{sum_grads, Bound, ParamId, ParamSet};
pub use scalar::Scalar;
pub use sparse::Csr;
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
