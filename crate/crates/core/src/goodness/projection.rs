//! Random orthonormal projections drawn from the Haar measure.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, shape_err, Result};
use crate::scalar::{dot, Scalar};
use crate::tensor::Tensor;

/// A fixed `k × d` matrix with orthonormal rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBasis {
    pub matrix: Tensor<f64>,
    pub seed: u64,
    pub block_index: usize,
}

impl ProjectionBasis {
    pub fn k(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// First `k` rows of the identity.
    pub fn coordinate(k: usize, d: usize, block_index: usize) -> Result<Self> {
        if k == 0 || k > d {
            return Err(invalid!("projection dimension {} must lie in 1..={}", k, d));
        }
        let mut m = Tensor::zeros(&[k, d]);
        for i in 0..k {
            m.data_mut()[i * d + i] = 1.0;
        }
        Ok(ProjectionBasis { matrix: m, seed: 0, block_index })
    }
}

/// First `k` rows of a Haar-distributed `d × d` orthogonal matrix.
///
/// A standard Gaussian matrix is QR-factorized and the columns of `Q` are
/// flipped so that `R` has a positive diagonal, which makes `Q` exactly Haar.
pub fn haar_basis(k: usize, d: usize, seed: u64) -> Result<ProjectionBasis> {
    haar_basis_for_block(k, d, seed, 0)
}

pub fn haar_basis_for_block(k: usize, d: usize, seed: u64, block_index: usize) -> Result<ProjectionBasis> {
    if k == 0 || k > d {
        return Err(invalid!("projection dimension {} must lie in 1..={}", k, d));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let qr = z.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut rows = Vec::with_capacity(k * d);
    for i in 0..k {
        rows.extend(q.row(i).iter().copied());
    }
    Ok(ProjectionBasis { matrix: Tensor::from_vec(&[k, d], rows)?, seed, block_index })
}

/// Maps every row `v` of `[n, d]` to `P v`.
pub fn project<T: Scalar>(samples: &Tensor<T>, basis: &ProjectionBasis) -> Result<Tensor<T>> {
    let [n, d] = samples.dims2()?;
    if d != basis.d() {
        return Err(shape_err!("samples have {} columns, basis expects {}", d, basis.d()));
    }
    let p: Tensor<T> = basis.matrix.cast();
    let k = basis.k();
    let mut out = Vec::with_capacity(n * k);
    for r in 0..n {
        let v = samples.row(r);
        for i in 0..k {
            out.push(dot(p.row(i), v));
        }
    }
    Tensor::from_vec(&[n, k], out)
}
