//! Dense tensors, a small reverse-mode tape and a finite-difference checker.

pub mod gradcheck;
mod graph;
pub mod io;
pub mod kernels;
pub mod ops;
mod params;
mod real;
mod tensor;

pub use gradcheck::{finite_diff_gradcheck, Coverage, GradcheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
