use crate::error::{invalid, Result};
use crate::scalar::{dot, Scalar};
use crate::tensor::Tensor;

/// Cosine orthogonality score of `d` flattened kernels (`[d, D]`).
///
/// `(1/d)·(1 + Σ_{i≥2} Σ_{j<i} (1 − cos(w_i, w_j))/(i−1))`: one for mutually
/// orthogonal kernels, `1/d` for identical ones.
pub fn cos_score<T: Scalar>(kernels: &Tensor<T>) -> Result<f64> {
    let [d, _] = kernels.dims2()?;
    if d < 2 {
        return Err(invalid!("cosine orthogonality needs at least two kernels, got {}", d));
    }
    let sq_norms: Vec<f64> = (0..d).map(|i| dot(kernels.row(i), kernels.row(i)).to_f64_lossy()).collect();
    if let Some(ch) = sq_norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(invalid!("kernel of channel {} has zero norm", ch));
    }
    let mut total = 1.0;
    for i in 1..d {
        let mut cos_sum = 0.0;
        for j in 0..i {
            // sqrt of the product keeps cos(w, ±w) exactly ±1
            let c = dot(kernels.row(i), kernels.row(j)).to_f64_lossy() / (sq_norms[i] * sq_norms[j]).sqrt();
            cos_sum += c;
        }
        total += (i as f64 - cos_sum) / i as f64;
    }
    Ok(total / d as f64)
}

/// Mean over channels of the standard deviation of each kernel's weights.
pub fn mean_kernel_std<T: Scalar>(kernels: &Tensor<T>) -> Result<f64> {
    let [d, len] = kernels.dims2()?;
    if d == 0 || len == 0 {
        return Err(invalid!("empty kernel tensor"));
    }
    let mut acc = 0.0;
    for i in 0..d {
        let row: Vec<f64> = kernels.row(i).iter().map(|v| v.to_f64_lossy()).collect();
        let mean = row.iter().sum::<f64>() / len as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
        acc += var.sqrt();
    }
    Ok(acc / d as f64)
}
