//! Batch normalization without learned affine parameters.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Normalized output and the per-channel `1/sqrt(var + eps)` used.
pub struct Normalized<T> {
    pub output: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes each channel of `[B,C,H,W]` over `(B,H,W)`.
///
/// Train mode uses the biased batch variance for normalization and folds the
/// unbiased one into the running estimate; eval mode uses the running estimate.
pub fn batchnorm2d<T: Scalar>(input: &Tensor<T>, state: &mut BatchNormState<T>, mode: Mode) -> Result<Normalized<T>> {
    let [b, c, h, w] = input.dims4()?;
    if c != state.channels() {
        return Err(shape_err!("batchnorm state has {} channels, input has {}", state.channels(), c));
    }
    let hw = h * w;
    let count = b * hw;
    let x = input.data();
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for bi in 0..b {
                    s += x[(bi * c + ch) * hw..][..hw].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0f64;
                for bi in 0..b {
                    ss += x[(bi * c + ch) * hw..][..hw]
                        .iter()
                        .map(|v| {
                            let d = v.to_f64_lossy() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / count as f64;
                let unbiased = if count > 1 { ss / (count - 1) as f64 } else { var[ch] };
                let mo = state.momentum;
                state.running_mean[ch] =
                    T::from_f64_lossy((1.0 - mo) * state.running_mean[ch].to_f64_lossy() + mo * m);
                state.running_var[ch] =
                    T::from_f64_lossy((1.0 - mo) * state.running_var[ch].to_f64_lossy() + mo * unbiased);
            }
            (mean, var)
        }
        Mode::Eval => (
            state.running_mean.iter().map(|v| v.to_f64_lossy()).collect(),
            state.running_var.iter().map(|v| v.to_f64_lossy()).collect(),
        ),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64_lossy(1.0 / (v + state.eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            let (m, is) = (mean_t[ch], inv_std[ch]);
            for (o, &v) in out[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                *o = (v - m) * is;
            }
        }
    }
    Ok(Normalized { output: Tensor::from_vec(input.shape(), out)?, inv_std })
}

/// Gradient of train-mode batch normalization given its output `y = x̂`.
pub fn batchnorm2d_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>, inv_std: &[T]) -> Result<Tensor<T>> {
    let [b, c, h, w] = output.dims4()?;
    if grad_out.shape() != output.shape() {
        return Err(shape_err!("batchnorm upstream gradient has shape {:?}", grad_out.shape()));
    }
    let hw = h * w;
    let n = T::from_usize(b * hw).unwrap();
    let (dy, y) = (grad_out.data(), output.data());
    let mut dx = vec![T::zero(); y.len()];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_y = T::zero();
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                sum_dy += dy[i];
                sum_dy_y += dy[i] * y[i];
            }
        }
        let k = inv_std[ch] / n;
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = k * (n * dy[i] - sum_dy - y[i] * sum_dy_y);
            }
        }
    }
    Tensor::from_vec(output.shape(), dx)
}
