//! Differentiable primitives, implemented as methods on [`Var`](crate::Var).

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod nn;
pub mod spatial;

pub use conv::conv_out_size;
pub use elementwise::{gelu_scalar, normal_cdf, sigmoid, softplus_scalar};
pub use nn::{softmax_slice, LN_EPS};
pub use spatial::SpatialMap;
