//! Double-precision dense arrays, reverse-mode differentiation, Adam and a
//! finite-difference gradient checker.

mod array;
mod gemm;
pub mod gradcheck;
mod optim;
mod params;
mod tape;

pub use array::DenseArray;
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, ParamCheck};
pub use optim::Adam;
pub use params::{ParamStore, PARAM_FORMAT_VERSION};
pub use tape::{sigmoid, Tape, Var};


#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
}
