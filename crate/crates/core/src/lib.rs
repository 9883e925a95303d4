//! t-process nonlinear ICA and its Gaussian-process limit.

pub mod autodiff;
pub mod elbo;
pub mod evaluation;
pub mod error;
pub mod lattice;
pub mod mixing;
pub mod optim;
pub mod posterior;
pub mod processes;
pub mod special;
pub mod tensor;

pub use error::{NicaError, Result};
