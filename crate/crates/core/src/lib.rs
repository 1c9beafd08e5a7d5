//! Quadtree-ordered selective state-space models for vision.
//!
//! The crate is organised bottom-up: a small tensor type with tape-based
//! reverse accumulation ([`tensor`], [`autograd`], [`ops`]), selective-scan
//! kernels ([`ssm`]), invertible 2D→1D scan orderings ([`quadtree`]), the
//! partition-score predictor and differentiable quadrant masking
//! ([`predictor`], [`gumbel`]), the (Quad)VSS blocks ([`block`]) and the
//! hierarchical classifier ([`backbone`]). [`harness`] holds the synthetic
//! task, training loop, benchmarks and self-test used by the `quadscan` CLI.

// `!(x > 0)` also rejects NaN; Var arithmetic is fallible, so it can't be the
// std operator traits; scan kernels index several buffers per loop variable.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::should_implement_trait,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod autograd;
pub mod backbone;
pub mod block;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod gumbel;
pub mod harness;
pub mod ops;
pub mod parallel;
pub mod params;
pub mod predictor;
pub mod quadtree;
pub mod ssm;
pub mod scalar;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
