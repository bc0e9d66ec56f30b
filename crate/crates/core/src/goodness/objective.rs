//! Consistency and diversity terms and their trade-off loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::goodness::moment::{effective_dim, second_moment_rows};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How consistency groups are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// One group per input: its noisy copies and spatial positions.
    #[default]
    Unsup,
    /// Noisy copies pooled across all inputs sharing a label.
    SupSampling,
    /// Clean inputs pooled by label (no copy sampling).
    Sup,
}

/// Mean ED over the `B` sample sets of `[B, n, k]`.
pub fn ed_consistency<T: Scalar>(projected: &Tensor<T>, eps: f64) -> Result<T> {
    let (b, n, k) = match projected.shape() {
        &[b, n, k] => (b, n, k),
        s => return Err(invalid!("consistency term expects [B, n, k], got {:?}", s)),
    };
    if b == 0 || n < 2 {
        return Err(invalid!("consistency term needs at least 2 samples per group, got {}", n));
    }
    let mut acc = T::zero();
    for i in 0..b {
        acc += effective_dim(&second_moment_rows(projected.data(), k, i * n..(i + 1) * n), eps);
    }
    Ok(acc / T::from_usize(b).unwrap())
}

/// ED of the copy-mean vectors `[B_samples, k]`.
pub fn ed_diversity<T: Scalar>(copy_means: &Tensor<T>, eps: f64) -> Result<T> {
    let [n, k] = copy_means.dims2()?;
    if n < 2 {
        return Err(invalid!("diversity term needs at least 2 samples, got {}", n));
    }
    Ok(effective_dim(&second_moment_rows(copy_means.data(), k, 0..n), eps))
}

/// `α·ED_c − (1−α)·ED_d`.
pub fn dc_loss<T: Scalar>(ed_c: T, ed_d: T, alpha: f64) -> Result<T> {
    check_alpha(alpha)?;
    Ok(T::from_f64_lossy(alpha) * ed_c - T::from_f64_lossy(1.0 - alpha) * ed_d)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid!("trade-off alpha must lie in [0, 1], got {}", alpha));
    }
    Ok(())
}

/// Sample views of conv activations `[B, N, C, H, W]`.
pub struct SampleViews<T> {
    /// `[B, N·H·W, C]`: one sample set per input.
    pub per_input: Tensor<T>,
    /// `[B·H·W, C]`: copy-averaged vectors at every position of every input.
    pub copy_means: Tensor<T>,
}

/// Treats channels as variables and copies × positions as samples.
pub fn channels_as_samples<T: Scalar>(activations: &Tensor<T>) -> Result<SampleViews<T>> {
    let (b, n, c, h, w) = match activations.shape() {
        &[b, n, c, h, w] => (b, n, c, h, w),
        s => return Err(invalid!("expected [B, N, C, H, W] activations, got {:?}", s)),
    };
    let hw = h * w;
    let x = activations.data();
    let mut per_input = Vec::with_capacity(x.len());
    let mut means = vec![T::zero(); b * hw * c];
    let inv_n = T::one() / T::from_usize(n).unwrap();
    for bi in 0..b {
        for j in 0..n {
            let item = &x[(bi * n + j) * c * hw..][..c * hw];
            for pos in 0..hw {
                for ch in 0..c {
                    let v = item[ch * hw + pos];
                    per_input.push(v);
                    means[(bi * hw + pos) * c + ch] += v * inv_n;
                }
            }
        }
    }
    Ok(SampleViews {
        per_input: Tensor::from_vec(&[b, n * hw, c], per_input)?,
        copy_means: Tensor::from_vec(&[b * hw, c], means)?,
    })
}

/// Row groups for the consistency term over rows ordered (input, copy, position).
pub fn consistency_groups(
    batch: usize,
    rows_per_input: usize,
    supervision: Supervision,
    labels: Option<&[usize]>,
) -> Result<Vec<Vec<usize>>> {
    let groups: Vec<Vec<usize>> = match supervision {
        Supervision::Unsup => (0..batch).map(|i| (i * rows_per_input..(i + 1) * rows_per_input).collect()).collect(),
        Supervision::SupSampling | Supervision::Sup => {
            let labels = labels.ok_or_else(|| invalid!("supervised grouping needs labels"))?;
            if labels.len() != batch {
                return Err(invalid!("{} labels for a batch of {}", labels.len(), batch));
            }
            let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
            for (i, &l) in labels.iter().enumerate() {
                members[l].push(i);
            }
            let mut groups = Vec::new();
            for (class, inputs) in members.into_iter().enumerate() {
                match inputs.len() {
                    0 => {}
                    1 => log::warn!("class {} has a single input in this batch; skipping its consistency group", class),
                    _ => groups.push(
                        inputs
                            .iter()
                            .flat_map(|&i| i * rows_per_input..(i + 1) * rows_per_input)
                            .collect(),
                    ),
                }
            }
            groups
        }
    };
    if groups.is_empty() {
        return Err(invalid!("no consistency group with at least two members"));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(invalid!("consistency group has {} sample(s); need at least 2", g.len()));
    }
    Ok(groups)
}

/// Graph nodes of one evaluation of the compression objective.
#[derive(Clone, Copy, Debug)]
pub struct DcTerms {
    pub loss: Var,
    pub ed_c: Var,
    pub ed_d: Var,
}

/// Builds `α·ED_c − (1−α)·ED_d` on block activations `[B, N, C, H, W]`.
pub fn dc_objective<T: Scalar>(
    g: &mut Graph<T>,
    activations: Var,
    basis: Option<&Tensor<T>>,
    alpha: f64,
    eps: f64,
    supervision: Supervision,
    labels: Option<&[usize]>,
) -> Result<DcTerms> {
    check_alpha(alpha)?;
    let (b, n, c, h, w) = match g.value(activations).shape() {
        &[b, n, c, h, w] => (b, n, c, h, w),
        s => return Err(invalid!("expected [B, N, C, H, W] activations, got {:?}", s)),
    };
    let hw = h * w;
    if b * hw < 2 {
        return Err(invalid!("diversity term needs at least 2 samples, got {}", b * hw));
    }
    let folded = g.reshape(activations, &[b * n, c, h, w])?;
    let rows = g.channel_samples(folded, basis)?;
    let k = g.value(rows).shape()[1];

    let groups = consistency_groups(b, n * hw, supervision, labels)?;
    let per_group = g.grouped_effective_dim(rows, groups, eps)?;
    let ed_c = g.mean(per_group)?;

    let stacked = g.reshape(rows, &[b, n, hw * k])?;
    let means = g.mean_axis1(stacked)?;
    let means = g.reshape(means, &[b * hw, k])?;
    let ed_d = g.grouped_effective_dim(means, vec![(0..b * hw).collect()], eps)?;

    let loss = g.combine(ed_c, T::from_f64_lossy(alpha), ed_d, T::from_f64_lossy(-(1.0 - alpha)))?;
    Ok(DcTerms { loss, ed_c, ed_d })
}
