//! Inverted dropout, both as a regularizer and as the noisy-copy sampler.

use rand::distr::{Bernoulli, Distribution};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn bernoulli(p: f64) -> Result<Bernoulli> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid!("dropout probability must lie in [0, 1), got {}", p));
    }
    Bernoulli::new(p).map_err(|e| invalid!("{}", e))
}

/// Multiplier per element: 0 for dropped entries, `1/(1-p)` for survivors.
pub(crate) fn sample_mask<T: Scalar, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Result<Vec<T>> {
    let drop = bernoulli(p)?;
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    if p == 0.0 {
        return Ok(vec![keep; len]);
    }
    Ok((0..len).map(|_| if drop.sample(rng) { T::zero() } else { keep }).collect())
}

/// Independently masked copies of every batch item: `[B, ...] → [B, N, ...]`.
///
/// Masks are drawn in (item, copy, element) order, so the result is a pure
/// function of the input and the RNG state.
pub fn dropout_copies<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    p: f64,
    n_copies: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    Ok(dropout_copies_masked(input, p, n_copies, rng, false)?.0)
}

pub(crate) fn dropout_copies_masked<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    p: f64,
    n_copies: usize,
    rng: &mut R,
    keep_mask: bool,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if n_copies == 0 {
        return Err(invalid!("need at least one noisy copy"));
    }
    let shape = input.shape();
    if shape.is_empty() {
        return Err(invalid!("dropout_copies needs a batch axis"));
    }
    let b = shape[0];
    let item = input.len() / b.max(1);
    let mask = sample_mask::<T, R>(b * n_copies * item, p, rng)?;
    let x = input.data();
    let mut out = Vec::with_capacity(mask.len());
    for bi in 0..b {
        let src = &x[bi * item..(bi + 1) * item];
        for j in 0..n_copies {
            let m = &mask[(bi * n_copies + j) * item..][..item];
            out.extend(src.iter().zip(m).map(|(&v, &k)| v * k));
        }
    }
    let mut out_shape = vec![b, n_copies];
    out_shape.extend_from_slice(&shape[1..]);
    Ok((Tensor::from_vec(&out_shape, out)?, keep_mask.then_some(mask)))
}

/// Plain inverted dropout; returns the output and the multiplier mask.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(input: &Tensor<T>, p: f64, rng: &mut R) -> Result<(Tensor<T>, Vec<T>)> {
    let mask = sample_mask::<T, R>(input.len(), p, rng)?;
    let out = input.data().iter().zip(&mask).map(|(&v, &k)| v * k).collect();
    Ok((Tensor::from_vec(input.shape(), out)?, mask))
}
