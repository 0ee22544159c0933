//! Dense tensors, a reverse-mode differentiation tape, and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, DEFAULT_STEP};
pub use graph::{Graph, KldDirection, Var, MASK_VALUE, RMS_EPS};
pub use params::ParamStore;
pub use tensor::{DType, Scalar, Tensor};
