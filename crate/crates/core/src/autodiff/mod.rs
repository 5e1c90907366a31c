//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Only the operators the fusion architecture needs are provided: linear
//! algebra, elementwise nonlinearities, softmax with temperature and masking,
//! reductions, 1-D (transposed) convolution, pooling, layer norm, dropout and
//! slicing.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;

pub use gradcheck::{grad_check, GradCheckOpts, GradCheckReport};
pub use graph::{Axis, Graph, Mode, NodeId, SoftmaxOpts};
pub use params::{ParamId, ParamStore};
