//! Slice-level compute kernels used by the tape operations.
//!
//! Kernels write into caller-provided buffers and never allocate tensors, so
//! all allocation accounting happens in the tape layer. Parallel variants
//! split work by output row only.

mod conv;
mod gemm;
mod resize;

pub use conv::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward, ConvGeometry};
pub use gemm::{gemm, GemmShape};
pub use resize::{cubic_taps, resize_axis, resize_axis_adjoint, CubicTaps};
