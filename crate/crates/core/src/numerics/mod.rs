//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference oracle.

pub mod conv;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use conv::ConvGeom;
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{BatchNormState, NormMode, Tape, Var};
pub use tensor::Tensor;
