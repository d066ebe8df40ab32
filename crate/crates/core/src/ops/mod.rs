//! Forward kernels and their adjoints on plain [`Tensor`](crate::Tensor)s.
//!
//! Everything here is tape-free; [`crate::autograd`] wraps these kernels
//! into recorded operations.

pub mod elementwise;
pub mod layout;
pub mod linalg;
pub mod nn;

pub use elementwise::{binary, broadcast_shape, gelu, reduce_to, sigmoid, softplus};
pub use layout::{concat, gather_axes, permute, scatter_axes};
pub use linalg::matmul;
pub use nn::{avg_pool2d, bilinear_resize, conv2d, index_select, layer_norm, softmax};
