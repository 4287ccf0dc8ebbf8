//! Collaborative perception message path: sparse feature selection, wire
//! packets, interpolation, recurrent fusion and evaluation.

pub mod cli;
pub mod entropy_cs;
pub mod error;
pub mod gcgru;
pub mod geometry;
pub mod interpolation;
pub mod metrics;
pub mod mgfe;
pub mod simulator;
pub mod tensor;
pub mod wire;

pub use error::{DecodeError, Error, ParamError, Result};
