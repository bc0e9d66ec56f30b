//! Row-major matrix product used by the convolution kernels.
//!
//! Every output element accumulates its products in increasing `k` order,
//! starting from zero (or from the existing value when accumulating).

use rayon::prelude::*;

use crate::scalar::Scalar;

const MR: usize = 4;
const NR: usize = 16;

/// `c[m×n] = a[m×k]·b[k×n]`, or `c += a·b` when `accumulate` is set.
pub fn gemm<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand sizes");
    let work = m * n * k;
    if work >= 1 << 20 && m > MR {
        c[..m * n].par_chunks_mut(MR * n).enumerate().for_each(|(t, cb)| {
            let rows = cb.len() / n;
            gemm_rows(rows, n, k, &a[t * MR * k..], b, cb, accumulate);
        });
    } else {
        gemm_rows(m, n, k, a, b, c, accumulate);
    }
}

fn gemm_rows<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let mut i = 0;
    while i < m {
        let mr = MR.min(m - i);
        let mut j = 0;
        while j < n {
            let nr = NR.min(n - j);
            if mr == MR && nr == NR {
                tile_full(n, k, &a[i * k..], &b[j..], &mut c[i * n + j..], accumulate);
            } else {
                tile_edge(mr, nr, n, k, &a[i * k..], &b[j..], &mut c[i * n + j..], accumulate);
            }
            j += NR;
        }
        i += MR;
    }
}

#[inline(always)]
fn tile_full<T: Scalar>(n: usize, k: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let mut acc = [[T::zero(); NR]; MR];
    if accumulate {
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&c[r * n..r * n + NR]);
        }
    }
    for p in 0..k {
        let bp: &[T; NR] = b[p * n..p * n + NR].try_into().unwrap();
        for (r, row) in acc.iter_mut().enumerate() {
            let av = a[r * k + p];
            for l in 0..NR {
                row[l] += av * bp[l];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[r * n..r * n + NR].copy_from_slice(row);
    }
}

fn tile_edge<T: Scalar>(mr: usize, nr: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    // partial rows of `b` are copied into a zero-padded full-width buffer so
    // the inner loop keeps its fixed width; padded lanes are discarded
    let mut acc = [[T::zero(); NR]; MR];
    if accumulate {
        for r in 0..mr {
            acc[r][..nr].copy_from_slice(&c[r * n..r * n + nr]);
        }
    }
    let mut bp = [T::zero(); NR];
    for p in 0..k {
        bp[..nr].copy_from_slice(&b[p * n..p * n + nr]);
        for (r, row) in acc.iter_mut().enumerate().take(mr) {
            let av = a[r * k + p];
            for l in 0..NR {
                row[l] += av * bp[l];
            }
        }
    }
    for r in 0..mr {
        c[r * n..r * n + nr].copy_from_slice(&acc[r][..nr]);
    }
}

/// Row-major transpose of an `rows×cols` matrix.
pub fn transpose<T: Copy>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    const TB: usize = 16;
    for r0 in (0..rows).step_by(TB) {
        let r1 = (r0 + TB).min(rows);
        for c0 in (0..cols).step_by(TB) {
            let c1 = (c0 + TB).min(cols);
            for r in r0..r1 {
                for c in c0..c1 {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c0: Option<&[f64]>) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = c0.map_or(0.0, |c0| c0[i * n + j]);
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matches_sequential_order_bitwise() {
        for &(m, n, k) in &[(1, 1, 1), (4, 16, 3), (5, 17, 9), (9, 33, 40), (70, 130, 120)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 + 3) as f64 * 0.713).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 + 1) as f64 * 0.377).cos()).collect();
            let mut c = vec![f64::NAN; m * n];
            gemm(m, n, k, &a, &b, &mut c, false);
            assert_eq!(c, naive(m, n, k, &a, &b, None));
            let c0 = c.clone();
            gemm(m, n, k, &a, &b, &mut c, true);
            assert_eq!(c, naive(m, n, k, &a, &b, Some(&c0)));
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let src: Vec<f64> = (0..6).map(f64::from).collect();
        let mut t = vec![0.0; 6];
        transpose(2, 3, &src, &mut t);
        assert_eq!(t, [0., 3., 1., 4., 2., 5.]);
        let (r, c) = (37, 21);
        let src: Vec<f64> = (0..r * c).map(|i| i as f64).collect();
        let (mut t, mut back) = (vec![0.0; r * c], vec![0.0; r * c]);
        transpose(r, c, &src, &mut t);
        assert_eq!(t[5 * r + 30], src[30 * c + 5]);
        transpose(c, r, &t, &mut back);
        assert_eq!(back, src);
    }
}
