//! Grouped 2-D convolution without bias.
//!
//! Implemented as im2col followed by a matrix product. Every output element
//! accumulates its products in (input channel, kernel row, kernel column)
//! order starting from zero, the order a naive six-loop direct convolution
//! uses. Padded taps contribute an exact zero, which leaves the sum unchanged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use super::gemm::{gemm, transpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, padding: 0, groups: 1 }
    }
}

/// `(len + 2·pad − k)/stride + 1`, or an error when the window does not fit.
pub fn window_output_len(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(invalid!("kernel and stride must be positive"));
    }
    if len + 2 * pad < k {
        return Err(shape_err!("window {} larger than padded extent {}", k, len + 2 * pad));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` for which `o·stride + tap − pad` lies in `[0, len)`.
#[inline]
pub(crate) fn valid_range(out_len: usize, len: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if len + pad > tap { ((len + pad - tap - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

#[derive(Clone, Copy)]
pub(crate) struct Geometry {
    pub(crate) batch: usize,
    pub(crate) cin: usize,
    pub(crate) h: usize,
    pub(crate) w: usize,
    pub(crate) cout: usize,
    pub(crate) cin_g: usize,
    pub(crate) kh: usize,
    pub(crate) kw: usize,
    pub(crate) oh: usize,
    pub(crate) ow: usize,
    pub(crate) cout_g: usize,
}

pub(crate) fn geometry(in_shape: &[usize], w_shape: &[usize], spec: Conv2dSpec) -> Result<Geometry> {
    let [batch, cin, h, w] = match in_shape {
        &[a, b, c, d] => [a, b, c, d],
        _ => return Err(shape_err!("conv2d input must be [B,C,H,W], got {:?}", in_shape)),
    };
    let [cout, cin_g, kh, kw] = match w_shape {
        &[a, b, c, d] => [a, b, c, d],
        _ => return Err(shape_err!("conv2d weight must be [Cout,Cin/g,kh,kw], got {:?}", w_shape)),
    };
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(invalid!("groups {} must divide input channels {} and output channels {}", g, cin, cout));
    }
    if cin / g != cin_g {
        return Err(shape_err!("weight expects {} channels per group, input provides {}", cin_g, cin / g));
    }
    let oh = window_output_len(h, kh, spec.stride, spec.padding)?;
    let ow = window_output_len(w, kw, spec.stride, spec.padding)?;
    Ok(Geometry { batch, cin, h, w, cout, cin_g, kh, kw, oh, ow, cout_g: cout / g })
}

/// Unfolds one group of one image into `col[(ci,ky,kx), (oy,ox)]`, with
/// zeros where a tap falls into the padding.
pub(crate) fn im2col<T: Scalar>(xg: &[T], geo: &Geometry, s: usize, p: usize, col: &mut [T]) {
    let Geometry { h, w, cin_g, kh, kw, oh, ow, .. } = *geo;
    let npix = oh * ow;
    for ci in 0..cin_g {
        let xp = &xg[ci * h * w..][..h * w];
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(oh, h, ky, s, p);
            for kx in 0..kw {
                let (ox0, ox1) = valid_range(ow, w, kx, s, p);
                let row = &mut col[((ci * kh + ky) * kw + kx) * npix..][..npix];
                row.fill(T::zero());
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let xrow = &xp[iy * w..(iy + 1) * w];
                    let orow = &mut row[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let ix0 = ox0 + kx - p;
                        orow[ox0..ox1].copy_from_slice(&xrow[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            orow[ox] = xrow[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

/// Adds `col` back onto the image positions it was unfolded from.
pub(crate) fn col2im<T: Scalar>(col: &[T], geo: &Geometry, s: usize, p: usize, dxg: &mut [T]) {
    let Geometry { h, w, cin_g, kh, kw, oh, ow, .. } = *geo;
    let npix = oh * ow;
    for ci in 0..cin_g {
        let dxp = &mut dxg[ci * h * w..][..h * w];
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(oh, h, ky, s, p);
            for kx in 0..kw {
                let (ox0, ox1) = valid_range(ow, w, kx, s, p);
                let row = &col[((ci * kh + ky) * kw + kx) * npix..][..npix];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let crow = &row[oy * ow..(oy + 1) * ow];
                    let dxrow = &mut dxp[iy * w..(iy + 1) * w];
                    for ox in ox0..ox1 {
                        dxrow[ox * s + kx - p] += crow[ox];
                    }
                }
            }
        }
    }
}

/// Forward convolution: `[B,Cin,H,W] ⊛ [Cout,Cin/g,kh,kw] → [B,Cout,H',W']`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    let geo = geometry(input.shape(), weight.shape(), spec)?;
    let Geometry { batch, cin, h, w, cout, cin_g, kh, kw, oh, ow, cout_g } = geo;
    let (s, p) = (spec.stride, spec.padding);
    let (npix, kdim) = (oh * ow, cin_g * kh * kw);
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); batch * cout * npix];
    out.par_chunks_mut(cout * npix).enumerate().for_each_init(
        || vec![T::zero(); kdim * npix],
        |col, (b, ob)| {
            for g in 0..spec.groups {
                im2col(&x[(b * cin + g * cin_g) * h * w..], &geo, s, p, col);
                gemm(cout_g, npix, kdim, &wt[g * cout_g * kdim..], col, &mut ob[g * cout_g * npix..], false);
            }
        },
    );
    Tensor::from_vec(&[batch, cout, oh, ow], out)
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    in_shape: &[usize],
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let geo = geometry(in_shape, weight.shape(), spec)?;
    let Geometry { batch, cin, h, w, cout, cin_g, kh, kw, oh, ow, cout_g } = geo;
    if grad_out.shape() != [batch, cout, oh, ow] {
        return Err(shape_err!("conv2d upstream gradient has shape {:?}", grad_out.shape()));
    }
    let (s, p) = (spec.stride, spec.padding);
    let (npix, kdim) = (oh * ow, cin_g * kh * kw);
    let dy = grad_out.data();
    let wt = weight.data();
    let mut wt_t = vec![T::zero(); wt.len()];
    for g in 0..spec.groups {
        let off = g * cout_g * kdim;
        transpose(cout_g, kdim, &wt[off..off + cout_g * kdim], &mut wt_t[off..off + cout_g * kdim]);
    }
    let mut dx = vec![T::zero(); batch * cin * h * w];
    dx.par_chunks_mut(cin * h * w).enumerate().for_each_init(
        || vec![T::zero(); kdim * npix],
        |dcol, (b, dxb)| {
            for g in 0..spec.groups {
                let dyg = &dy[(b * cout + g * cout_g) * npix..];
                gemm(kdim, npix, cout_g, &wt_t[g * cout_g * kdim..], dyg, dcol, false);
                col2im(dcol, &geo, s, p, &mut dxb[g * cin_g * h * w..]);
            }
        },
    );
    Tensor::from_vec(in_shape, dx)
}

/// Gradient with respect to the convolution weight.
pub fn conv2d_backward_weight<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    w_shape: &[usize],
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let geo = geometry(input.shape(), w_shape, spec)?;
    let Geometry { batch, cin, h, w, cout, cin_g, kh, kw, oh, ow, cout_g } = geo;
    if grad_out.shape() != [batch, cout, oh, ow] {
        return Err(shape_err!("conv2d upstream gradient has shape {:?}", grad_out.shape()));
    }
    let (s, p) = (spec.stride, spec.padding);
    let (npix, kdim) = (oh * ow, cin_g * kh * kw);
    let dy = grad_out.data();
    let x = input.data();
    let mut dw = vec![T::zero(); cout * kdim];
    let mut col = vec![T::zero(); kdim * npix];
    let mut col_t = vec![T::zero(); kdim * npix];
    for b in 0..batch {
        for g in 0..spec.groups {
            im2col(&x[(b * cin + g * cin_g) * h * w..], &geo, s, p, &mut col);
            transpose(kdim, npix, &col, &mut col_t);
            let dyg = &dy[(b * cout + g * cout_g) * npix..];
            gemm(cout_g, kdim, npix, dyg, &col_t, &mut dw[g * cout_g * kdim..], true);
        }
    }
    Tensor::from_vec(w_shape, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_example() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let w = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 0., 0., 1.]).unwrap();
        let y = conv2d(&x, &w, Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn centered_delta_is_identity() {
        let vals: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let x = Tensor::<f64>::from_f64(&[1, 1, 3, 3], &vals).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::<f64>::from_f64(&[1, 1, 3, 3], &k).unwrap();
        let y = conv2d(&x, &w, Conv2dSpec { stride: 1, padding: 1, groups: 1 }).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn rejects_bad_groups() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[4, 1, 3, 3]);
        assert!(conv2d(&x, &w, Conv2dSpec { stride: 1, padding: 1, groups: 2 }).is_err());
        let w = Tensor::<f32>::zeros(&[6, 2, 3, 3]);
        assert!(conv2d(&x, &w, Conv2dSpec { stride: 1, padding: 1, groups: 3 }).is_err());
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(window_output_len(28, 5, 1, 2).unwrap(), 28);
        assert_eq!(window_output_len(28, 4, 2, 1).unwrap(), 14);
        assert_eq!(window_output_len(7, 2, 2, 0).unwrap(), 3);
        assert!(window_output_len(1, 4, 1, 1).is_err());
    }

    #[test]
    fn valid_range_strided() {
        // len 5, pad 1, stride 2, tap 0: ix = 2o - 1 valid for o in 1..=3 (out_len 3)
        assert_eq!(valid_range(3, 5, 0, 2, 1), (1, 3));
        assert_eq!(valid_range(3, 5, 2, 2, 1), (0, 2));
    }
}
