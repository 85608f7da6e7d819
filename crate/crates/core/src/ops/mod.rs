//! Numeric kernels with hand-written backward passes.

pub mod act;
pub mod conv;
pub mod norm;
pub mod resample;

pub use conv::{Conv2d, ConvGrad, Padding};
pub use norm::{cin_backward, cin_forward, cin_forward_cached, CinCache, CIN_EPS};
pub use resample::{scaled_extent, upsample_nearest2, upsample_nearest2_backward, Resize};
