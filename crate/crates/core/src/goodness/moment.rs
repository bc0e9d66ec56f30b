//! Second uncentered moments and the effective dimensionality derived from them.

use crate::error::{invalid, Result};
use crate::ops::gemm::{gemm, transpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_ED_EPS: f64 = 1e-12;

/// `M = (1/n) Σ x xᵀ` together with its trace and squared Frobenius norm.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSummary<T> {
    pub dim: usize,
    /// Row-major `dim × dim`, exactly symmetric.
    pub matrix: Vec<T>,
    pub trace: T,
    pub frob_sq: T,
    pub n_samples: usize,
}

impl<T: Scalar> MomentSummary<T> {
    pub fn at(&self, i: usize, j: usize) -> T {
        self.matrix[i * self.dim + j]
    }

    fn from_upper(dim: usize, mut matrix: Vec<T>, n_samples: usize) -> Self {
        let inv_n = T::one() / T::from_usize(n_samples).unwrap();
        let mut trace = T::zero();
        let mut frob_sq = T::zero();
        for i in 0..dim {
            for j in i..dim {
                let v = matrix[i * dim + j] * inv_n;
                matrix[i * dim + j] = v;
                matrix[j * dim + i] = v;
                if i == j {
                    trace += v;
                    frob_sq += v * v;
                } else {
                    frob_sq += (v * v) + (v * v);
                }
            }
        }
        MomentSummary { dim, matrix, trace, frob_sq, n_samples }
    }
}

/// Second moment of the rows of an `[n, d]` sample matrix.
pub fn second_moment<T: Scalar>(samples: &Tensor<T>) -> Result<MomentSummary<T>> {
    let [n, d] = samples.dims2()?;
    if n == 0 {
        return Err(invalid!("second moment needs at least one sample"));
    }
    Ok(second_moment_rows(samples.data(), d, 0..n))
}

/// Maximal runs `[start, end)` of consecutive row indices.
pub(crate) fn row_runs(rows: impl IntoIterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for r in rows {
        match runs.last_mut() {
            Some(last) if last.1 == r => last.1 += 1,
            _ => runs.push((r, r + 1)),
        }
    }
    runs
}

const MOMENT_CHUNK: usize = 2048;

/// Second moment over selected rows of a row-major matrix with `dim` columns.
pub(crate) fn second_moment_rows<T: Scalar>(
    data: &[T],
    dim: usize,
    rows: impl IntoIterator<Item = usize>,
) -> MomentSummary<T> {
    let mut acc = vec![T::zero(); dim * dim];
    let mut xt = Vec::new();
    let mut n = 0usize;
    for (r0, r1) in row_runs(rows) {
        let mut c0 = r0;
        while c0 < r1 {
            let c1 = (c0 + MOMENT_CHUNK).min(r1);
            let len = c1 - c0;
            let x = &data[c0 * dim..c1 * dim];
            xt.resize(len * dim, T::zero());
            transpose(len, dim, x, &mut xt);
            gemm(dim, dim, len, &xt, x, &mut acc, true);
            n += len;
            c0 = c1;
        }
    }
    MomentSummary::from_upper(dim, acc, n.max(1))
}

/// `tr(M)² / (‖M‖_F² + eps)`; zero for an all-zero moment.
pub fn effective_dim<T: Scalar>(m: &MomentSummary<T>, eps: f64) -> T {
    m.trace * m.trace / (m.frob_sq + T::from_f64_lossy(eps))
}

/// Symmetric `∂ED/∂M = (2t/F) I − (2t²/F²) M` with `F = ‖M‖_F² + eps`.
pub(crate) fn effective_dim_grad<T: Scalar>(m: &MomentSummary<T>, eps: f64) -> Vec<T> {
    let f = m.frob_sq + T::from_f64_lossy(eps);
    let two = T::from_f64_lossy(2.0);
    let diag = two * m.trace / f;
    let off = -two * m.trace * m.trace / (f * f);
    let mut g: Vec<T> = m.matrix.iter().map(|&v| off * v).collect();
    for i in 0..m.dim {
        g[i * m.dim + i] += diag;
    }
    g
}
