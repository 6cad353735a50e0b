//! Joint estimation of an energy-based model and a normalizing flow on 2D
//! synthetic distributions, with MLE and noise-contrastive baselines and a
//! semi-supervised class-conditional variant.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ebm;
pub mod error;
pub mod eval;
pub mod flow;
pub mod nn;
pub mod optim;
pub mod runner;
pub mod semisup;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{FceError, Result};
pub use tensor::Tensor;
