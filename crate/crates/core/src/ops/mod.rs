//! Layer kernels: forward passes and their exact reverse-mode gradients.
//!
//! Convolution and fully-connected products accumulate in `f64` and round
//! the stored result to `f32`.

mod conv;
mod dense;
mod pool;

pub(crate) use conv::conv2d_f64;
pub use conv::{conv2d_backward, conv2d_forward, conv_output_len};
pub use dense::{fc_backward, fc_forward, relu_backward, relu_forward, softmax_cross_entropy};
pub use pool::{maxpool_backward, maxpool_forward, PoolRouting};
