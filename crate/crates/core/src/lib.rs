//! Hamiltonian neural networks with autoregressive training and
//! unscented filtering.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod integrators;
pub mod io;
pub mod linalg;
pub mod models;
pub mod pipeline;
pub mod systems;
pub mod training;
pub mod ukf;

pub use error::{Error, Result};
