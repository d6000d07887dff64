//! Self-contained reverse-mode automatic differentiation over dense
//! tensors, generic over f32/f64.
//!
//! The pieces: [`Tensor`] (dense row-major storage), [`Graph`]/[`Var`] (the
//! tape), an op library in `ops`, and finite-difference verification in
//! [`gradcheck`]. Training code runs at f32; gradient checks instantiate the
//! identical generic code at f64.

pub mod gradcheck;
mod graph;
mod ops;
pub mod scalar;
mod tensor;

pub use graph::{Graph, ParentGrads, Var};
pub use ops::concat;
pub use scalar::{logit, sigmoid, Scalar};
pub use tensor::Tensor;
