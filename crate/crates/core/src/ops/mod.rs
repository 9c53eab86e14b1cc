//! Differentiable operations recorded onto a [`Graph`](crate::autodiff::Graph).

mod activation;
mod basic;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;

pub use activation::{dropout, relu};
pub use basic::{concat_channels, elementwise_sum, mul, sum_all, sum_many};
pub use conv::{conv2d, conv2d_forward, conv_output_size, count_conv_params, ConvConfig, ConvWeights};
pub use linear::linear;
pub use loss::{softmax, softmax_cross_entropy};
pub use norm::{batch_norm, BatchNormState, BN_EPS, BN_MOMENTUM};
pub use pool::{avg_pool2d, global_avg_pool};

/// Whether an op runs with training behaviour (batch statistics, active
/// dropout) or inference behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
