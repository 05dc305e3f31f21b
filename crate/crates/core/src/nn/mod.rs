//! Dense tensor engine: the kernels, loss, initializer and optimizer used by
//! the All-ConvNet, generic over `f32` (training) and `f64` (verification).

mod activation;
mod adam;
mod batchnorm;
mod conv;
pub mod gradcheck;
mod init;
mod loss;
mod rng;
mod scalar;
mod tensor;

pub use activation::{
    dropout, elu, elu_backward, global_average_pool, global_average_pool_backward, DropoutMask,
    ELU_ALPHA,
};
pub use adam::AdamState;
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_infer, batchnorm_infer_backward, BatchNorm, BnCache,
    BN_EPSILON, BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvGrads};
pub use gradcheck::{finite_difference_check, Differentiable, GradCheckConfig, GradCheckReport};
pub use init::{xavier_bound, xavier_init};
pub use loss::{argmax, cross_entropy, softmax, softmax_cross_entropy, softmax_rows, PROB_FLOOR};
pub use rng::RngStream;
pub use scalar::{exp_f32, Scalar};
pub use tensor::Tensor;

/// Train mode uses batch statistics and stochastic regularization; infer mode
/// is a deterministic function of the input and stored state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}
