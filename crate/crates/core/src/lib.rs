//! Tensor algebra, reverse-mode automatic differentiation and the neural
//! network building blocks used across the neurodecode pipeline.

pub mod error;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod kernels;
pub mod nn;
mod nn_ops;
mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_store, GradCheckConfig, GradCheckReport};
pub use params::{apply_updates, Ctx, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
