//! Max and average pooling over square windows.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::ops::conv::{valid_range, window_output_len};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub mode: PoolMode,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn output_len(&self, len: usize) -> Result<usize> {
        window_output_len(len, self.kernel, self.stride, self.padding)
    }
}

/// Pooled output plus, for max pooling, the in-plane index each output came from.
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Option<Vec<u32>>,
}

/// Window bounds `[y0, y1) × [x0, x1)` of output `(oy, ox)`, clipped to the plane.
#[inline]
fn window(spec: PoolSpec, h: usize, w: usize, oy: usize, ox: usize) -> (usize, usize, usize, usize) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    (
        (oy * s).saturating_sub(p),
        (oy * s + k).saturating_sub(p).min(h),
        (ox * s).saturating_sub(p),
        (ox * s + k).saturating_sub(p).min(w),
    )
}

fn check_windows(spec: PoolSpec, h: usize, w: usize, oh: usize, ow: usize) -> Result<()> {
    for (oy, ox) in [(0, 0), (oh - 1, ow - 1)] {
        let (y0, y1, x0, x1) = window(spec, h, w, oy, ox);
        if y0 >= y1 || x0 >= x1 {
            return Err(shape_err!("pooling window at ({}, {}) covers only padding", oy, ox));
        }
    }
    Ok(())
}

/// Pools one `h×w` plane into `out` (`oh×ow`), recording argmax for max pooling.
///
/// Windows are scanned in row-major order. The plane is first split into its
/// `stride` column phases so that every kernel tap reads a contiguous run.
pub(crate) fn pool_plane<T: Scalar>(
    xp: &[T],
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    spec: PoolSpec,
    out: &mut [T],
    argmax: Option<&mut [u32]>,
) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let plen = w.div_ceil(s);
    // per tap: phase, first phase index, valid output range
    let taps: Vec<(usize, usize, usize, usize)> = (0..k)
        .filter_map(|kx| {
            let (ox0, ox1) = valid_range(ow, w, kx, s, p);
            (ox0 < ox1).then(|| {
                let ix0 = ox0 * s + kx - p;
                (ix0 % s, ix0 / s, ox0, ox1)
            })
        })
        .collect();
    let mut phases = vec![T::zero(); h * s * plen];
    for iy in 0..h {
        let row = &xp[iy * w..(iy + 1) * w];
        let dst = &mut phases[iy * s * plen..(iy + 1) * s * plen];
        for r in 0..s.min(w) {
            for (d, &v) in dst[r * plen..].iter_mut().zip(row[r..].iter().step_by(s)) {
                *d = v;
            }
        }
    }
    let run = |iy: usize, r: usize, j0: usize, len: usize| &phases[(iy * s + r) * plen + j0..][..len];
    match (spec.mode, argmax) {
        (PoolMode::Max, None) => {
            for oy in 0..oh {
                let (y0, y1, _, _) = window(spec, h, w, oy, 0);
                let orow = &mut out[oy * ow..(oy + 1) * ow];
                orow.fill(T::neg_infinity());
                for iy in y0..y1 {
                    for &(r, j0, ox0, ox1) in &taps {
                        for (o, &v) in orow[ox0..ox1].iter_mut().zip(run(iy, r, j0, ox1 - ox0)) {
                            *o = if v > *o { v } else { *o };
                        }
                    }
                }
            }
        }
        (PoolMode::Max, Some(am)) => {
            for oy in 0..oh {
                let (y0, y1, _, _) = window(spec, h, w, oy, 0);
                let orow = &mut out[oy * ow..(oy + 1) * ow];
                let arow = &mut am[oy * ow..(oy + 1) * ow];
                orow.fill(T::neg_infinity());
                arow.fill(0);
                for iy in y0..y1 {
                    for &(r, j0, ox0, ox1) in &taps {
                        let base = (iy * w + j0 * s + r) as u32;
                        let src = run(iy, r, j0, ox1 - ox0);
                        for (i, ((o, a), &v)) in orow[ox0..ox1].iter_mut().zip(&mut arow[ox0..ox1]).zip(src).enumerate() {
                            let gt = v > *o;
                            *o = if gt { v } else { *o };
                            *a = if gt { base + (i * s) as u32 } else { *a };
                        }
                    }
                }
            }
        }
        (PoolMode::Avg, _) => {
            for oy in 0..oh {
                let (y0, y1, _, _) = window(spec, h, w, oy, 0);
                let orow = &mut out[oy * ow..(oy + 1) * ow];
                orow.fill(T::zero());
                for iy in y0..y1 {
                    for &(r, j0, ox0, ox1) in &taps {
                        for (o, &v) in orow[ox0..ox1].iter_mut().zip(run(iy, r, j0, ox1 - ox0)) {
                            *o += v;
                        }
                    }
                }
                for (ox, v) in orow.iter_mut().enumerate() {
                    let (_, _, x0, x1) = window(spec, h, w, oy, ox);
                    *v /= T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                }
            }
        }
    }
}

/// Pools an image stored channels-last (`y[(iy·w + ix)·c + ch]`) into
/// `out[(oy·ow + ox)·c + ch]`, with the same window order and tie rule as
/// [`pool2d`]. Argmax entries are in-plane indices `iy·w + ix`.
pub(crate) fn pool_channels_last<T: Scalar>(
    y: &[T],
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    c: usize,
    spec: PoolSpec,
    out: &mut [T],
    mut argmax: Option<&mut [u32]>,
) {
    for oy in 0..oh {
        for ox in 0..ow {
            let (y0, y1, x0, x1) = window(spec, h, w, oy, ox);
            let o = (oy * ow + ox) * c;
            let dst = &mut out[o..o + c];
            match spec.mode {
                PoolMode::Max => {
                    dst.fill(T::neg_infinity());
                    let mut am = argmax.as_deref_mut().map(|a| &mut a[o..o + c]);
                    if let Some(a) = am.as_deref_mut() {
                        a.fill(0);
                    }
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let pos = iy * w + ix;
                            let src = &y[pos * c..(pos + 1) * c];
                            match am.as_deref_mut() {
                                Some(a) => {
                                    for ((d, a), &v) in dst.iter_mut().zip(a.iter_mut()).zip(src) {
                                        let gt = v > *d;
                                        *d = if gt { v } else { *d };
                                        *a = if gt { pos as u32 } else { *a };
                                    }
                                }
                                None => {
                                    for (d, &v) in dst.iter_mut().zip(src) {
                                        *d = if v > *d { v } else { *d };
                                    }
                                }
                            }
                        }
                    }
                }
                PoolMode::Avg => {
                    dst.fill(T::zero());
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let pos = iy * w + ix;
                            for (d, &v) in dst.iter_mut().zip(&y[pos * c..(pos + 1) * c]) {
                                *d += v;
                            }
                        }
                    }
                    let n = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                    for d in dst.iter_mut() {
                        *d /= n;
                    }
                }
            }
        }
    }
}

/// Input cells covered by the window of output `o` of an `h×w` plane
/// pooled to width `ow`, and their count.
pub(crate) fn window_cells(spec: PoolSpec, h: usize, w: usize, ow: usize, o: usize) -> (usize, usize, usize, usize) {
    window(spec, h, w, o / ow, o % ow)
}

/// Adds the gradient of one pooled plane onto `dxp` (`h×w`).
pub(crate) fn pool_plane_backward<T: Scalar>(
    dy: &[T],
    h: usize,
    w: usize,
    ow: usize,
    spec: PoolSpec,
    argmax: Option<&[u32]>,
    dxp: &mut [T],
) {
    match argmax {
        Some(am) => {
            for (o, &g) in dy.iter().enumerate() {
                dxp[am[o] as usize] += g;
            }
        }
        None => {
            for (o, &g) in dy.iter().enumerate() {
                let (y0, y1, x0, x1) = window(spec, h, w, o / ow, o % ow);
                let share = g / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                for iy in y0..y1 {
                    for v in &mut dxp[iy * w + x0..iy * w + x1] {
                        *v += share;
                    }
                }
            }
        }
    }
}

/// Output size of pooling an `h×w` plane, with windows checked to overlap it.
pub(crate) fn pooled_dims(spec: PoolSpec, h: usize, w: usize) -> Result<(usize, usize)> {
    let (oh, ow) = (spec.output_len(h)?, spec.output_len(w)?);
    check_windows(spec, h, w, oh, ow)?;
    Ok((oh, ow))
}

/// Pools a `[B,C,H,W]` tensor. Max pooling treats padding as −∞ and keeps
/// the first maximum in row-major window order; average pooling divides by
/// the number of in-bounds cells.
pub fn pool2d<T: Scalar>(input: &Tensor<T>, spec: PoolSpec) -> Result<Pooled<T>> {
    let [b, c, h, w] = input.dims4()?;
    let (oh, ow) = pooled_dims(spec, h, w)?;
    let x = input.data();
    let planes = b * c;
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut argmax = match spec.mode {
        PoolMode::Max => Some(vec![0u32; planes * oh * ow]),
        PoolMode::Avg => None,
    };
    for plane in 0..planes {
        let o = plane * oh * ow..(plane + 1) * oh * ow;
        let am = argmax.as_mut().map(|a| &mut a[o.clone()]);
        pool_plane(&x[plane * h * w..(plane + 1) * h * w], (h, w), (oh, ow), spec, &mut out[o], am);
    }
    Ok(Pooled { output: Tensor::from_vec(&[b, c, oh, ow], out)?, argmax })
}

/// Routes `grad_out` back to the pooled input.
pub fn pool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    in_shape: &[usize],
    spec: PoolSpec,
    argmax: Option<&[u32]>,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = match in_shape {
        &[a, b, c, d] => [a, b, c, d],
        _ => return Err(shape_err!("pool input must be rank 4, got {:?}", in_shape)),
    };
    let (oh, ow) = pooled_dims(spec, h, w)?;
    if grad_out.shape() != [b, c, oh, ow] {
        return Err(shape_err!("pool upstream gradient has shape {:?}", grad_out.shape()));
    }
    if spec.mode == PoolMode::Max && argmax.is_none() {
        return Err(shape_err!("max-pool backward needs argmax indices"));
    }
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let o = plane * oh * ow..(plane + 1) * oh * ow;
        let am = if spec.mode == PoolMode::Max { argmax.map(|a| &a[o.clone()]) } else { None };
        pool_plane_backward(&dy[o], h, w, ow, spec, am, &mut dx[plane * h * w..(plane + 1) * h * w]);
    }
    Tensor::from_vec(in_shape, dx)
}
