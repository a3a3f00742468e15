//! Numeric kernels and their analytic gradients.

pub mod conv;
pub mod elementwise;
pub mod gradcheck;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod resize;

pub use conv::{conv2d, conv2d_backward, depthwise_separable_conv3x3, ConvParams};
pub use elementwise::{add, concat_channels, relu, relu_backward, split_channels};
pub use loss::{softmax_cross_entropy, CrossEntropy};
pub use norm::{batch_norm, batch_norm_backward, BnMode, BnRunning, BN_EPSILON, BN_MOMENTUM};
pub use pool::{
    avg_pool_backward, grid_avg_pool, grid_avg_pool_backward, grid_avg_pool_cells, pool,
    pool_backward, PoolKind, PoolParams,
};
pub use resize::{bilinear_resize, bilinear_resize_backward};
