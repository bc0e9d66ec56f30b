//! Tensor kernels. Each forward has a matching backward used by the
//! computation graph in [`crate::autodiff`].

pub mod conv;
pub mod dropout;
pub mod fused;
pub mod gemm;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, conv2d_backward_input, conv2d_backward_weight, Conv2dSpec};
pub use dropout::{dropout, dropout_copies};
pub use fused::{conv_block, conv_block_backward, ConvBlockSaved};
pub use linear::{linear, linear_backward};
pub use loss::{argmax_rows, softmax, softmax_cross_entropy, softmax_cross_entropy_backward};
pub use norm::{batchnorm2d, batchnorm2d_backward, BatchNormState, Mode};
pub use pool::{pool2d, pool2d_backward, PoolMode, PoolSpec};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the upstream gradient where the input was strictly positive.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Tensor<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let x = Tensor::<f64>::from_f64(&[3], &[-1., 0., 2.]).unwrap();
        assert_eq!(relu(&x).data(), &[0., 0., 2.]);
        let pos = Tensor::<f64>::from_f64(&[2], &[0.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let x = Tensor::<f64>::from_f64(&[2], &[-1., 2.]).unwrap();
        let g = Tensor::<f64>::from_f64(&[2], &[5., 5.]).unwrap();
        assert_eq!(relu_backward(&g, &x).data(), &[0., 5.]);
    }
}
