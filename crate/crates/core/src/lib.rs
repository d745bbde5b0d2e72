//! Clustering-guided sparse self-attention.
//!
//! Tokens are grouped by kNN density-peaks clustering, each cluster is merged
//! into one representative token, and attention runs from every query against
//! the (much shorter) list of representatives. The crate contains:
//!
//! - [`numerics`]: tensors, a reverse-mode tape and gradient checking;
//! - [`clustering`]: density, peak distance, decision scores, assignment and
//!   weighted aggregation;
//! - [`attention`]: dense, clustered, multi-head and multi-scale attention,
//!   the grid-pooling baseline and multiply–accumulate accounting;
//! - [`model`]: the four-stage pyramid backbone and its named variants.

pub mod attention;
pub mod clustering;
mod error;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{Graph, ParamStore, Real, Tensor, Var};
