pub mod channel;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod expert;
pub mod gnn;
pub mod linalg;
pub mod manifest;
pub mod pipeline;
pub mod policy;
pub mod rates;
pub mod rng;
pub mod train;
