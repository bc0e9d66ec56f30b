//! `pool(relu(conv2d(x, w)))` computed one image at a time, so the
//! full-resolution convolution output is never materialized.
//!
//! Results equal the composition of [`conv2d`](super::conv2d),
//! [`relu`](super::relu) and [`pool2d`](super::pool2d) exactly in the forward
//! direction.

use rayon::prelude::*;

use super::conv::{col2im, geometry, im2col, valid_range, Conv2dSpec, Geometry};
use super::gemm::{gemm, transpose};
use super::pool::{pool_channels_last, pooled_dims, window_cells, PoolMode, PoolSpec};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What the reverse pass needs beyond the inputs and the output.
#[derive(Clone, Debug, Default)]
pub struct ConvBlockSaved {
    /// Max pooling: in-plane source index of every output.
    pub argmax: Option<Vec<u32>>,
    /// Average pooling: 1 where the convolution output was positive.
    pub active: Option<Vec<u8>>,
}

/// Images per work chunk of the reverse pass; fixed so that the summation
/// order of the weight gradient does not depend on the thread count.
const CHUNK: usize = 16;

struct Dims {
    geo: Geometry,
    ph: usize,
    pw: usize,
}

fn dims(in_shape: &[usize], w_shape: &[usize], conv: Conv2dSpec, pool: PoolSpec) -> Result<Dims> {
    let geo = geometry(in_shape, w_shape, conv)?;
    let (ph, pw) = pooled_dims(pool, geo.oh, geo.ow)?;
    Ok(Dims { geo, ph, pw })
}

/// `[K, Cout_g]` per group: the transposed weight of each group, stacked.
fn weight_t<T: Scalar>(wt: &[T], groups: usize, cout_g: usize, kdim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); wt.len()];
    for g in 0..groups {
        let r = g * cout_g * kdim..(g + 1) * cout_g * kdim;
        transpose(cout_g, kdim, &wt[r.clone()], &mut out[r]);
    }
    out
}

/// Weight laid out `[ci, tap, Cout]` for the channels-last grouped kernel.
fn weight_cl<T: Scalar>(wt: &[T], cout: usize, cin_g: usize, taps: usize) -> Vec<T> {
    let mut out = vec![T::zero(); wt.len()];
    for co in 0..cout {
        for ci in 0..cin_g {
            for t in 0..taps {
                out[(ci * taps + t) * cout + co] = wt[(co * cin_g + ci) * taps + t];
            }
        }
    }
    out
}

/// `x_exp[(ci·HW + pos)·Cout + co] = x[group(co)·cin_g + ci][pos]`: the
/// inputs of each output channel's group, broadcast channels-last.
fn expand_input<T: Scalar>(xb: &[T], geo: &Geometry, x_exp: &mut [T]) {
    let Geometry { h, w, cout, cin_g, cout_g, .. } = *geo;
    let hw = h * w;
    let groups = cout / cout_g;
    for ci in 0..cin_g {
        let dst = &mut x_exp[ci * hw * cout..][..hw * cout];
        for (pos, row) in dst.chunks_exact_mut(cout).enumerate() {
            for (g, cell) in row.chunks_exact_mut(cout_g).enumerate().take(groups) {
                cell.fill(xb[(g * cin_g + ci) * hw + pos]);
            }
        }
    }
}

/// Kernel taps `lo..hi` that land inside an input of length `len` for output
/// coordinate `o`.
#[inline]
fn tap_range(o: usize, len: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(o * s);
    let hi = k.min((len + p).saturating_sub(o * s));
    (lo, hi.max(lo))
}

const LANES: usize = 32;

/// Splits `0..cout` into full `LANES`-wide chunks and single-channel tails.
fn lane_chunks(cout: usize) -> impl Iterator<Item = (usize, bool)> {
    let full = cout / LANES * LANES;
    (0..full).step_by(LANES).map(|c| (c, true)).chain((full..cout).map(|c| (c, false)))
}

/// Convolution output for channels `c0..c0 + N` of output pixel `(oy, ox)`,
/// summed over (ci, ky, kx) in ascending order.
#[inline(always)]
fn pixel_chunk<T: Scalar, const N: usize>(wcl: &[T], x_exp: &[T], geo: &Geometry, s: usize, p: usize, (oy, ox): (usize, usize), c0: usize) -> [T; N] {
    let Geometry { h, w, cout, cin_g, kh, kw, .. } = *geo;
    let (hw, taps) = (h * w, kh * kw);
    let (ky0, ky1) = tap_range(oy, h, kh, s, p);
    let (kx0, kx1) = tap_range(ox, w, kw, s, p);
    let mut acc = [T::zero(); N];
    for ci in 0..cin_g {
        for ky in ky0..ky1 {
            let iy = oy * s + ky - p;
            for kx in kx0..kx1 {
                let pos = iy * w + ox * s + kx - p;
                let wv: &[T; N] = wcl[(ci * taps + ky * kw + kx) * cout + c0..][..N].try_into().unwrap();
                let xv: &[T; N] = x_exp[(ci * hw + pos) * cout + c0..][..N].try_into().unwrap();
                for l in 0..N {
                    acc[l] += wv[l] * xv[l];
                }
            }
        }
    }
    acc
}

/// Grouped convolution of one image into channels-last `yt[pix·Cout + co]`.
/// Per output: (ci, ky, kx) order from zero, out-of-bounds taps skipped.
fn grouped_forward<T: Scalar>(xb: &[T], wcl: &[T], geo: &Geometry, s: usize, p: usize, x_exp: &mut [T], yt: &mut [T]) {
    let Geometry { cout, oh, ow, .. } = *geo;
    expand_input(xb, geo, x_exp);
    for oy in 0..oh {
        for ox in 0..ow {
            let out = &mut yt[(oy * ow + ox) * cout..][..cout];
            for (c0, full) in lane_chunks(cout) {
                if full {
                    out[c0..c0 + LANES].copy_from_slice(&pixel_chunk::<T, LANES>(wcl, x_exp, geo, s, p, (oy, ox), c0));
                } else {
                    out[c0] = pixel_chunk::<T, 1>(wcl, x_exp, geo, s, p, (oy, ox), c0)[0];
                }
            }
        }
    }
}

/// Weight-gradient contribution of one image for channels `c0..c0 + N` and
/// tap `(ci, ky, kx)`: the sum over output pixels.
#[inline(always)]
fn weight_chunk<T: Scalar, const N: usize>(dyt: &[T], x_exp: &[T], geo: &Geometry, s: usize, p: usize, (ci, ky, kx): (usize, usize, usize), c0: usize) -> [T; N] {
    let Geometry { h, w, cout, oh, ow, .. } = *geo;
    let hw = h * w;
    let (oy0, oy1) = valid_range(oh, h, ky, s, p);
    let (ox0, ox1) = valid_range(ow, w, kx, s, p);
    let mut acc = [T::zero(); N];
    for oy in oy0..oy1 {
        let iy = oy * s + ky - p;
        for ox in ox0..ox1 {
            let pos = iy * w + ox * s + kx - p;
            let gv: &[T; N] = dyt[(oy * ow + ox) * cout + c0..][..N].try_into().unwrap();
            let xv: &[T; N] = x_exp[(ci * hw + pos) * cout + c0..][..N].try_into().unwrap();
            for l in 0..N {
                acc[l] += gv[l] * xv[l];
            }
        }
    }
    acc
}

/// Input-gradient contribution, channels-last, for channels `c0..c0 + N` of
/// input position `(iy, ix)` and group input `ci`.
#[inline(always)]
fn input_chunk<T: Scalar, const N: usize>(dyt: &[T], wcl: &[T], geo: &Geometry, s: usize, p: usize, (ci, iy, ix): (usize, usize, usize), c0: usize) -> [T; N] {
    let Geometry { cout, kh, kw, oh, ow, .. } = *geo;
    let taps = kh * kw;
    let mut acc = [T::zero(); N];
    for ky in 0..kh {
        let ty = iy + p;
        if ty < ky || (ty - ky) % s != 0 || (ty - ky) / s >= oh {
            continue;
        }
        let oy = (ty - ky) / s;
        for kx in 0..kw {
            let tx = ix + p;
            if tx < kx || (tx - kx) % s != 0 || (tx - kx) / s >= ow {
                continue;
            }
            let ox = (tx - kx) / s;
            let gv: &[T; N] = dyt[(oy * ow + ox) * cout + c0..][..N].try_into().unwrap();
            let wv: &[T; N] = wcl[(ci * taps + ky * kw + kx) * cout + c0..][..N].try_into().unwrap();
            for l in 0..N {
                acc[l] += gv[l] * wv[l];
            }
        }
    }
    acc
}

/// Reverse pass of [`grouped_forward`] for one image: accumulates into the
/// `[ci, tap, Cout]` weight gradient and/or writes the input gradient.
#[allow(clippy::too_many_arguments)]
fn grouped_backward<T: Scalar>(
    xb: &[T],
    wcl: &[T],
    dyt: &[T],
    geo: &Geometry,
    s: usize,
    p: usize,
    x_exp: &mut [T],
    dw_cl: Option<&mut [T]>,
    dxb: Option<&mut [T]>,
) {
    let Geometry { h, w, cout, cin_g, cout_g, kh, kw, .. } = *geo;
    let (taps, hw) = (kh * kw, h * w);
    if let Some(dw) = dw_cl {
        expand_input(xb, geo, x_exp);
        for ci in 0..cin_g {
            for ky in 0..kh {
                for kx in 0..kw {
                    let d = &mut dw[(ci * taps + ky * kw + kx) * cout..][..cout];
                    for (c0, full) in lane_chunks(cout) {
                        if full {
                            let part = weight_chunk::<T, LANES>(dyt, x_exp, geo, s, p, (ci, ky, kx), c0);
                            for (a, v) in d[c0..c0 + LANES].iter_mut().zip(part) {
                                *a += v;
                            }
                        } else {
                            d[c0] += weight_chunk::<T, 1>(dyt, x_exp, geo, s, p, (ci, ky, kx), c0)[0];
                        }
                    }
                }
            }
        }
    }
    if let Some(dx) = dxb {
        let mut row = vec![T::zero(); cout];
        for ci in 0..cin_g {
            for iy in 0..h {
                for ix in 0..w {
                    for (c0, full) in lane_chunks(cout) {
                        if full {
                            row[c0..c0 + LANES].copy_from_slice(&input_chunk::<T, LANES>(dyt, wcl, geo, s, p, (ci, iy, ix), c0));
                        } else {
                            row[c0] = input_chunk::<T, 1>(dyt, wcl, geo, s, p, (ci, iy, ix), c0)[0];
                        }
                    }
                    let pos = iy * w + ix;
                    for (g, part) in row.chunks_exact(cout_g).enumerate() {
                        let mut sum = T::zero();
                        for &v in part {
                            sum += v;
                        }
                        dx[(g * cin_g + ci) * hw + pos] += sum;
                    }
                }
            }
        }
    }
}

/// Forward pass; with `keep` set also returns what the reverse pass needs.
///
/// Each image is convolved into a channels-last buffer `[H'·W', Cout]` so
/// that the ReLU and pooling sweep contiguous channel vectors.
pub fn conv_block<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    conv: Conv2dSpec,
    pool: PoolSpec,
    keep: bool,
) -> Result<(Tensor<T>, Option<ConvBlockSaved>)> {
    let Dims { geo, ph, pw } = dims(input.shape(), weight.shape(), conv, pool)?;
    let Geometry { batch, cin, h, w, cout, cin_g, kh, kw, oh, ow, .. } = geo;
    let (npix, kdim, nout) = (oh * ow, cin_g * kh * kw, ph * pw);
    let (s, p) = (conv.stride, conv.padding);
    let groups = conv.groups;
    let x = input.data();
    let wt = if groups == 1 {
        weight_t(weight.data(), 1, cout, kdim)
    } else {
        weight_cl(weight.data(), cout, cin_g, kh * kw)
    };
    let want_argmax = keep && pool.mode == PoolMode::Max;
    let want_active = keep && pool.mode == PoolMode::Avg;
    let slot_len = |on: bool, len: usize| if on { len } else { 1 };
    let (am_len, act_len) = (slot_len(want_argmax, cout * nout), slot_len(want_active, npix * cout));
    let mut out = vec![T::zero(); batch * cout * nout];
    let mut argmax = vec![0u32; batch * am_len];
    let mut active = vec![0u8; batch * act_len];
    out.par_chunks_mut(cout * nout)
        .zip(argmax.par_chunks_mut(am_len))
        .zip(active.par_chunks_mut(act_len))
        .enumerate()
        .for_each_init(
            || {
                let (col, xe) = if groups == 1 { (kdim * npix, 0) } else { (0, cin_g * h * w * cout) };
                let bufs = (vec![T::zero(); col], vec![T::zero(); col], vec![T::zero(); npix * cout], vec![T::zero(); xe]);
                (bufs, vec![T::zero(); nout * cout], vec![0u32; if want_argmax { nout * cout } else { 0 }])
            },
            |((col, col_t, yt, x_exp), pooled, am_t), (b, ((ob, am), act))| {
                let xb = &x[b * cin * h * w..(b + 1) * cin * h * w];
                if groups == 1 {
                    im2col(xb, &geo, s, p, col);
                    transpose(kdim, npix, col, col_t);
                    gemm(npix, cout, kdim, col_t, &wt, yt, false);
                } else {
                    grouped_forward(xb, &wt, &geo, s, p, x_exp, yt);
                }
                for v in yt.iter_mut() {
                    if !(*v > T::zero()) {
                        *v = T::zero();
                    }
                }
                if want_active {
                    for (m, &v) in act.iter_mut().zip(yt.iter()) {
                        *m = u8::from(v > T::zero());
                    }
                }
                let slot = if want_argmax { Some(am_t.as_mut_slice()) } else { None };
                pool_channels_last(yt, (oh, ow), (ph, pw), cout, pool, pooled, slot);
                transpose(nout, cout, pooled, ob);
                if want_argmax {
                    transpose(nout, cout, am_t, am);
                }
            },
        );
    let output = Tensor::from_vec(&[batch, cout, ph, pw], out)?;
    let saved = keep.then(|| ConvBlockSaved {
        argmax: want_argmax.then_some(argmax),
        active: want_active.then_some(active),
    });
    Ok((output, saved))
}

/// Gradients with respect to the input and the weight (each only when asked).
#[allow(clippy::too_many_arguments)]
pub fn conv_block_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    output: &Tensor<T>,
    conv: Conv2dSpec,
    pool: PoolSpec,
    saved: &ConvBlockSaved,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let Dims { geo, ph, pw } = dims(input.shape(), weight.shape(), conv, pool)?;
    let Geometry { batch, cin, h, w, cout, cin_g, kh, kw, oh, ow, .. } = geo;
    if grad_out.shape() != [batch, cout, ph, pw] || output.shape() != grad_out.shape() {
        return Err(shape_err!("conv block upstream gradient has shape {:?}", grad_out.shape()));
    }
    let argmax = match pool.mode {
        PoolMode::Max => Some(saved.argmax.as_deref().ok_or_else(|| shape_err!("max-pool backward needs argmax indices"))?),
        PoolMode::Avg => None,
    };
    let active = match pool.mode {
        PoolMode::Avg => Some(saved.active.as_deref().ok_or_else(|| shape_err!("conv block backward needs its relu mask"))?),
        PoolMode::Max => None,
    };
    let (npix, kdim, nout) = (oh * ow, cin_g * kh * kw, ph * pw);
    let (s, p) = (conv.stride, conv.padding);
    let groups = conv.groups;
    let (x, wt, dy, yv) = (input.data(), weight.data(), grad_out.data(), output.data());
    let wlen = cout * kdim;
    let wcl = if groups > 1 { weight_cl(wt, cout, cin_g, kh * kw) } else { Vec::new() };
    let chunks: Vec<(usize, usize)> = (0..batch).step_by(CHUNK).map(|b0| (b0, (b0 + CHUNK).min(batch))).collect();
    let parts: Vec<(Vec<T>, Vec<T>)> = chunks
        .par_iter()
        .map(|&(b0, b1)| {
            let mut dw_t = vec![T::zero(); if need_weight { wlen } else { 0 }];
            let mut dx = vec![T::zero(); if need_input { (b1 - b0) * cin * h * w } else { 0 }];
            let mut dconv_t = vec![T::zero(); npix * cout];
            let (mut dy_t, mut share) = (vec![T::zero(); nout * cout], vec![T::zero(); cout]);
            let is_max = argmax.is_some();
            let mut y_t = vec![T::zero(); if is_max { nout * cout } else { 0 }];
            let mut am_t = vec![0u32; if is_max { nout * cout } else { 0 }];
            let cols = if groups == 1 { kdim * npix } else { 0 };
            let mut col = vec![T::zero(); cols];
            let mut col_t = vec![T::zero(); cols];
            let mut x_exp = vec![T::zero(); if groups > 1 { cin_g * h * w * cout } else { 0 }];
            for b in b0..b1 {
                dconv_t.fill(T::zero());
                let o = b * cout * nout..(b + 1) * cout * nout;
                transpose(cout, nout, &dy[o.clone()], &mut dy_t);
                match argmax {
                    Some(am) => {
                        transpose(cout, nout, &yv[o.clone()], &mut y_t);
                        transpose(cout, nout, &am[o], &mut am_t);
                        for j in 0..nout {
                            let r = j * cout..(j + 1) * cout;
                            for (co, ((&g, &y), &a)) in dy_t[r.clone()].iter().zip(&y_t[r.clone()]).zip(&am_t[r]).enumerate() {
                                if y > T::zero() {
                                    dconv_t[a as usize * cout + co] += g;
                                }
                            }
                        }
                    }
                    None => {
                        for j in 0..nout {
                            let (y0, y1, x0, x1) = window_cells(pool, oh, ow, pw, j);
                            let count = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                            for (sh, &g) in share.iter_mut().zip(&dy_t[j * cout..(j + 1) * cout]) {
                                *sh = g / count;
                            }
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    for (d, &v) in dconv_t[(iy * ow + ix) * cout..][..cout].iter_mut().zip(&share) {
                                        *d += v;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(act) = active {
                    for (d, &a) in dconv_t.iter_mut().zip(&act[b * npix * cout..(b + 1) * npix * cout]) {
                        if a == 0 {
                            *d = T::zero();
                        }
                    }
                }
                if groups == 1 {
                    if need_weight {
                        im2col(&x[b * cin * h * w..], &geo, s, p, &mut col);
                        gemm(kdim, cout, npix, &col, &dconv_t, &mut dw_t, true);
                    }
                    if need_input {
                        gemm(npix, kdim, cout, &dconv_t, wt, &mut col_t, false);
                        transpose(npix, kdim, &col_t, &mut col);
                        col2im(&col, &geo, s, p, &mut dx[(b - b0) * cin * h * w..]);
                    }
                } else {
                    let dxb = if need_input { Some(&mut dx[(b - b0) * cin * h * w..(b - b0 + 1) * cin * h * w]) } else { None };
                    let dwc = if need_weight { Some(dw_t.as_mut_slice()) } else { None };
                    grouped_backward(&x[b * cin * h * w..(b + 1) * cin * h * w], &wcl, &dconv_t, &geo, s, p, &mut x_exp, dwc, dxb);
                }
            }
            (dw_t, dx)
        })
        .collect();
    let dw = if need_weight {
        let mut acc = vec![T::zero(); wlen];
        for (part, _) in &parts {
            for (a, &v) in acc.iter_mut().zip(part) {
                *a += v;
            }
        }
        let mut dw = vec![T::zero(); wlen];
        if groups == 1 {
            transpose(kdim, cout, &acc, &mut dw);
        } else {
            let taps = kh * kw;
            for co in 0..cout {
                for ci in 0..cin_g {
                    for t in 0..taps {
                        dw[(co * cin_g + ci) * taps + t] = acc[(ci * taps + t) * cout + co];
                    }
                }
            }
        }
        Some(Tensor::from_vec(weight.shape(), dw)?)
    } else {
        None
    };
    let dx = if need_input {
        let data: Vec<T> = parts.into_iter().flat_map(|(_, dx)| dx).collect();
        Some(Tensor::from_vec(input.shape(), data)?)
    } else {
        None
    };
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{conv2d, conv2d_backward_input, conv2d_backward_weight, pool2d, pool2d_backward, relu, relu_backward};

    fn data(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + salt) * 0.7131).sin()).collect()
    }

    fn composed(x: &Tensor<f64>, w: &Tensor<f64>, conv: Conv2dSpec, pool: PoolSpec, dy: &Tensor<f64>) -> [Tensor<f64>; 3] {
        let c = conv2d(x, w, conv).unwrap();
        let r = relu(&c);
        let pl = pool2d(&r, pool).unwrap();
        let dr = pool2d_backward(dy, r.shape(), pool, pl.argmax.as_deref()).unwrap();
        let dc = relu_backward(&dr, &c);
        let dx = conv2d_backward_input(&dc, w, x.shape(), conv).unwrap();
        let dw = conv2d_backward_weight(&dc, x, w.shape(), conv).unwrap();
        [pl.output, dx, dw]
    }

    #[test]
    fn matches_composition() {
        let cases = [
            ([3, 2, 9, 9], [4, 2, 3, 3], Conv2dSpec { stride: 1, padding: 1, groups: 1 }, PoolSpec { mode: PoolMode::Max, kernel: 4, stride: 2, padding: 1 }),
            ([2, 4, 7, 7], [8, 2, 3, 3], Conv2dSpec { stride: 1, padding: 1, groups: 2 }, PoolSpec { mode: PoolMode::Avg, kernel: 2, stride: 2, padding: 0 }),
            ([17, 1, 6, 6], [3, 1, 5, 5], Conv2dSpec { stride: 1, padding: 2, groups: 1 }, PoolSpec { mode: PoolMode::Max, kernel: 2, stride: 2, padding: 0 }),
            ([5, 3, 8, 8], [12, 1, 3, 3], Conv2dSpec { stride: 1, padding: 1, groups: 3 }, PoolSpec { mode: PoolMode::Max, kernel: 4, stride: 2, padding: 1 }),
            ([2, 4, 5, 5], [4, 2, 3, 3], Conv2dSpec { stride: 2, padding: 1, groups: 2 }, PoolSpec { mode: PoolMode::Max, kernel: 2, stride: 1, padding: 0 }),
        ];
        for (xs, ws, conv, pool) in cases {
            let x = Tensor::from_f64(&xs, &data(xs.iter().product(), 0.3)).unwrap();
            let w = Tensor::from_f64(&ws, &data(ws.iter().product(), 11.0)).unwrap();
            let (y, saved) = conv_block(&x, &w, conv, pool, true).unwrap();
            let dy = Tensor::from_f64(y.shape(), &data(y.len(), 5.0)).unwrap();
            let [y_ref, dx_ref, dw_ref] = composed(&x, &w, conv, pool, &dy);
            assert_eq!(y, y_ref);
            let (dx, dw) = conv_block_backward(&dy, &x, &w, &y, conv, pool, &saved.unwrap(), true, true).unwrap();
            for (a, b) in dx.unwrap().data().iter().zip(dx_ref.data()).chain(dw.unwrap().data().iter().zip(dw_ref.data())) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
