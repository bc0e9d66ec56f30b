use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [rows, classes] = logits.dims2()?;
    let mut out = Vec::with_capacity(rows * classes);
    for r in 0..rows {
        let row = logits.row(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - m).exp()));
        let z: T = out[start..].iter().copied().sum();
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    Tensor::from_vec(&[rows, classes], out)
}

/// Mean cross-entropy of `softmax(logits)` against class indices.
///
/// Returns the loss and the softmax probabilities; the gradient with
/// respect to the logits is `(probs − onehot)/B`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [rows, classes] = logits.dims2()?;
    if labels.len() != rows {
        return Err(invalid!("{} labels for {} rows of logits", labels.len(), rows));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(invalid!("label {} out of range for {} classes", bad, classes));
    }
    let probs = softmax(logits)?;
    let mut loss = T::zero();
    for (r, &l) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss += lse - row[l];
    }
    Ok((loss / T::from_usize(rows).unwrap(), probs))
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    let [rows, _] = scores.dims2()?;
    Ok((0..rows)
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize], upstream: T) -> Tensor<T> {
    let rows = labels.len();
    let classes = probs.len() / rows.max(1);
    let scale = upstream / T::from_usize(rows).unwrap();
    let mut g = probs.clone();
    for (r, &l) in labels.iter().enumerate() {
        g.data_mut()[r * classes + l] -= T::one();
    }
    g.scale(scale);
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let s = Tensor::<f64>::from_f64(&[3, 3], &[1., 3., 3., 0., 0., 0., -1., -2., 5.]).unwrap();
        assert_eq!(argmax_rows(&s).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let x = Tensor::<f64>::zeros(&[3, 10]);
        let (loss, _) = softmax_cross_entropy(&x, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_class() {
        let mut x = Tensor::<f64>::zeros(&[1, 10]);
        x.data_mut()[3] = 1000.0;
        let (loss, _) = softmax_cross_entropy(&x, &[3]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn closed_form_gradient() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[0.1, -0.3, 0.7, 1.0, 2.0, -1.0]).unwrap();
        let labels = [2, 0];
        let (_, p) = softmax_cross_entropy(&x, &labels).unwrap();
        let g = softmax_cross_entropy_backward(&p, &labels, 1.0);
        for r in 0..2 {
            for c in 0..3 {
                let onehot = if labels[r] == c { 1.0 } else { 0.0 };
                let expect = (p.data()[r * 3 + c] - onehot) / 2.0;
                assert!((g.data()[r * 3 + c] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn label_out_of_range() {
        let x = Tensor::<f32>::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&x, &[3]).is_err());
    }
}
