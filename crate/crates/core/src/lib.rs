//! Continual few-shot learning with a transformer weight generator.
//!
//! A generator reads a task's support set together with the CNN weights it
//! produced for the previous task and emits updated weights. Prototype
//! distances over the generated embeddings give task-incremental and
//! class-incremental predictions.

#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod baselines;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod generator;
pub mod learner;
pub mod serialize;
pub mod target_cnn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
