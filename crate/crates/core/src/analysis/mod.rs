//! Inference, accuracy, layer-wise effective-dimensionality profiles, linear
//! probes and the information breakdown of classifier readouts.

pub mod info;

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use info::{
    bits, fit_gaussian_classes, gaussian_entropy, gmm_entropy_mc, info_breakdown, EntropyTarget, Estimate,
    GaussianClassModel, InfoBreakdown, COV_REGULARIZER, DEFAULT_MC_SAMPLES,
};

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::dataio::{batch_indices, Dataset, Preprocess};
use crate::error::{invalid, Result};
use crate::goodness::moment::{effective_dim, second_moment_rows};
use crate::goodness::{channels_as_samples, cos_score, mean_kernel_std, project, ProjectionBasis};
use crate::network::{score, Classifier, Network, Regime, ScoreStrategy};
use crate::ops::argmax_rows;
use crate::scalar::Scalar;
use crate::seeds::stream;
use crate::tensor::Tensor;
use crate::trainer::{evaluate_heads, heads_epoch, train_block, BlockTrace, DataContext, HeadJob, MetricsRow, TrainState};

/// Class scores `[B, K]` and the rule that produced them.
#[derive(Clone, Debug)]
pub struct ScoreTensor<T> {
    pub scores: Tensor<T>,
    pub strategy: ScoreStrategy,
}

impl<T: Scalar> ScoreTensor<T> {
    /// Highest-scoring class per row; ties go to the lowest index.
    pub fn predictions(&self) -> Result<Vec<usize>> {
        argmax_rows(&self.scores)
    }
}

/// Scores of `head` reading block `block` on preprocessed images. `Direct`
/// always makes a single clean pass whatever `copies` is.
#[allow(clippy::too_many_arguments)]
pub fn readout_scores<T: Scalar, R: Rng + ?Sized>(
    network: &mut Network<T>,
    head: &Classifier<T>,
    block: usize,
    images: &Tensor<T>,
    strategy: ScoreStrategy,
    copies: usize,
    rng: &mut R,
) -> Result<ScoreTensor<T>> {
    let mut g = Graph::new();
    let feats = network.features_forward(&mut g, images, Regime::Frozen, strategy.sampling(copies), block, rng)?;
    let logits = head.forward(&mut g, feats, false, false, rng)?;
    let s = score(&mut g, logits, strategy)?;
    Ok(ScoreTensor { scores: g.value(s).clone(), strategy })
}

/// Scores of the network's own classifier.
pub fn predict_scores<T: Scalar, R: Rng + ?Sized>(
    network: &mut Network<T>,
    images: &Tensor<T>,
    strategy: ScoreStrategy,
    copies: usize,
    rng: &mut R,
) -> Result<ScoreTensor<T>> {
    let head = network.classifier.clone();
    let last = network.n_blocks() - 1;
    readout_scores(network, &head, last, images, strategy, copies, rng)
}

/// Accuracy of the network's classifier on a split.
pub fn evaluate<T: Scalar>(
    network: &mut Network<T>,
    dataset: &Dataset,
    preprocess: &Preprocess,
    cfg: &RunConfig,
    strategy: ScoreStrategy,
    seed: u64,
) -> Result<f64> {
    let head = network.classifier.clone();
    let last = network.n_blocks() - 1;
    Ok(evaluate_heads(network, &[(&head, last, strategy)], dataset, preprocess, cfg, seed)?[0])
}

/// Scores of `head` over a whole split, row-major `[n, K]` in `f64`, with the labels.
#[allow(clippy::too_many_arguments)]
pub fn collect_scores<T: Scalar>(
    network: &mut Network<T>,
    head: &Classifier<T>,
    block: usize,
    dataset: &Dataset,
    preprocess: &Preprocess,
    cfg: &RunConfig,
    strategy: ScoreStrategy,
    seed: u64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut rng = stream(seed, &[]);
    let mut out = Vec::with_capacity(dataset.len() * head.n_classes());
    let mut labels = Vec::with_capacity(dataset.len());
    for idx in batch_indices(dataset.len(), cfg.batch_size, false, 0, 0)? {
        let (raw, lab) = dataset.gather(&idx);
        let x: Tensor<T> = preprocess.batch(&raw, false, &mut rng)?;
        let s = readout_scores(network, head, block, &x, strategy, cfg.n_copies(), &mut rng)?;
        out.extend(s.scores.to_f64_vec());
        labels.extend(lab);
    }
    Ok((out, labels))
}

/// Effective dimensionalities of one block's output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdProfileRow {
    /// 1-based block number.
    pub block: usize,
    /// Dimension the activations were projected to (the channel count when unprojected).
    pub dims: usize,
    pub ed_d: f64,
    pub ed_c_mean: f64,
    pub ed_c_std: f64,
    pub ratio: f64,
}

/// ED_c and ED_d of every block on noisy copies of a split, after the same
/// projection used in training.
///
/// ED_c is computed per input, averaged within each class, and summarized by
/// the mean and (population) standard deviation of the class averages. ED_d
/// is computed per batch of `cfg.batch_size` inputs, as in training, and
/// averaged over batches weighted by their size.
pub fn layer_ed_profile<T: Scalar>(
    network: &mut Network<T>,
    bases: &[Option<ProjectionBasis>],
    dataset: &Dataset,
    preprocess: &Preprocess,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<EdProfileRow>> {
    let n_blocks = network.n_blocks();
    if bases.len() != n_blocks {
        return Err(invalid!("{} projection bases for {} blocks", bases.len(), n_blocks));
    }
    let eps = cfg.goodness.eps;
    let n_classes = dataset.n_classes;
    let mut class_sum = vec![vec![0.0; n_classes]; n_blocks];
    let mut class_count = vec![0usize; n_classes];
    let mut ed_d_sum = vec![0.0; n_blocks];
    let mut rng = stream(seed, &[]);
    let sampling = ScoreStrategy::MeanSquare.sampling(cfg.n_copies());
    for idx in batch_indices(dataset.len(), cfg.batch_size, false, 0, 0)? {
        let (raw, labels) = dataset.gather(&idx);
        let x: Tensor<T> = preprocess.batch(&raw, false, &mut rng)?;
        let mut g = Graph::new();
        let feats = network.features_forward_all(&mut g, &x, Regime::Frozen, sampling, n_blocks - 1, &mut rng)?;
        for (l, f) in feats.into_iter().enumerate() {
            let act = f.unfold(&mut g)?;
            let views = channels_as_samples(g.value(act))?;
            let [b, rows, c] = [views.per_input.shape()[0], views.per_input.shape()[1], views.per_input.shape()[2]];
            let (per_input, means, k) = match &bases[l] {
                Some(basis) => {
                    let flat = views.per_input.clone().reshape(&[b * rows, c])?;
                    (project(&flat, basis)?, project(&views.copy_means, basis)?, basis.k())
                }
                None => (views.per_input.clone(), views.copy_means.clone(), c),
            };
            for (i, &label) in labels.iter().enumerate() {
                let ed = effective_dim(&second_moment_rows(per_input.data(), k, i * rows..(i + 1) * rows), eps);
                class_sum[l][label] += ed.to_f64_lossy();
            }
            let n_means = means.len() / k;
            ed_d_sum[l] += effective_dim(&second_moment_rows(means.data(), k, 0..n_means), eps).to_f64_lossy() * b as f64;
        }
        for &label in &labels {
            class_count[label] += 1;
        }
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| class_count[c] > 0).collect();
    let mut rows = Vec::with_capacity(n_blocks);
    for l in 0..n_blocks {
        let class_means: Vec<f64> = present.iter().map(|&c| class_sum[l][c] / class_count[c] as f64).collect();
        let m = class_means.iter().sum::<f64>() / class_means.len() as f64;
        let var = class_means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / class_means.len() as f64;
        let ed_d = ed_d_sum[l] / dataset.len() as f64;
        let dims = match &bases[l] {
            Some(b) => b.k(),
            None => network.block_output_shape(l)?[0],
        };
        rows.push(EdProfileRow { block: l + 1, dims, ed_d, ed_c_mean: m, ed_c_std: var.sqrt(), ratio: ed_d / m });
    }
    Ok(rows)
}

/// Outcome of a linear probe on one block.
#[derive(Clone, Debug)]
pub struct ProbeResult<T> {
    /// 1-based block number.
    pub block: usize,
    pub accuracy: f64,
    pub best_epoch: usize,
    pub head: Classifier<T>,
    pub history: Vec<MetricsRow>,
}

/// Trains a fresh linear head on each listed (0-based) block of the frozen
/// network with the classifier protocol: `cfg.phase2_epochs` epochs, the
/// configured class score, best validation accuracy kept. The heads share
/// feature passes but not randomness.
pub fn linear_probes<T: Scalar>(
    network: &mut Network<T>,
    blocks: &[usize],
    data: &DataContext,
    cfg: &RunConfig,
) -> Result<Vec<ProbeResult<T>>> {
    let mut jobs = blocks
        .iter()
        .map(|&l| HeadJob::new(cfg, network, &format!("probe{}", l + 1), l, cfg.score))
        .collect::<Result<Vec<_>>>()?;
    for e in 0..cfg.phase2_epochs {
        heads_epoch(network, cfg, data, &mut jobs, e)?;
    }
    Ok(jobs
        .into_iter()
        .map(|j| ProbeResult {
            block: j.block + 1,
            accuracy: j.best_acc,
            best_epoch: j.best_epoch,
            head: j.best.unwrap_or(j.head),
            history: j.history,
        })
        .collect())
}

/// Information breakdown of a head's readout: class-conditional Gaussians
/// fitted to its scores on a split, then Monte-Carlo entropies.
#[allow(clippy::too_many_arguments)]
pub fn readout_info<T: Scalar>(
    network: &mut Network<T>,
    head: &Classifier<T>,
    block: usize,
    dataset: &Dataset,
    preprocess: &Preprocess,
    cfg: &RunConfig,
    n_per_component: usize,
    seed: u64,
) -> Result<InfoBreakdown> {
    let (scores, labels) = collect_scores(network, head, block, dataset, preprocess, cfg, cfg.score, seed)?;
    let model = fit_gaussian_classes(&scores, head.n_classes(), &labels, dataset.n_classes)?;
    info_breakdown(&model, n_per_component, seed)
}

/// Block kernels and training statistics after training with one trade-off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub cos: f64,
    pub kernel_std: f64,
    /// Mean over the last epoch's batches.
    pub loss: f64,
    pub ed_c: f64,
    pub ed_d: f64,
}

/// Trains a fresh network for each `alpha` (blocks `0..=block` for
/// `cfg.phase1_epochs` epochs) and scores the kernels of `block` (0-based)
/// with [`cos_score`] on their flattened `[C_out, C_in/groups·k·k]` view.
pub fn alpha_sweep<T: Scalar>(cfg: &RunConfig, data: &DataContext, alphas: &[f64], block: usize) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut c = cfg.clone();
        c.goodness.alpha = alpha;
        let mut state = TrainState::<T>::new(c)?;
        if block >= state.network.n_blocks() {
            return Err(invalid!("block {} out of range", block + 1));
        }
        let mut last = BlockTrace::default();
        for e in 0..cfg.phase1_epochs {
            for l in 0..=block {
                let trace = train_block(&mut state, l, e, data)?;
                if l == block {
                    last = trace;
                }
            }
        }
        let w = &state.network.blocks[block].weight.value;
        let cout = w.shape()[0];
        let kernels = w.clone().reshape(&[cout, w.len() / cout])?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let row = SweepRow {
            alpha,
            cos: cos_score(&kernels)?,
            kernel_std: mean_kernel_std(&kernels)?,
            loss: last.mean_loss(),
            ed_c: mean(&last.ed_c),
            ed_d: mean(&last.ed_d),
        };
        log::info!("alpha {alpha}: COS {:.4}, kernel std {:.4}", row.cos, row.kernel_std);
        rows.push(row);
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "alpha,cos,kernel_std,loss,ed_c,ed_d";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{},{}", r.alpha, r.cos, r.kernel_std, r.loss, r.ed_c, r.ed_d).unwrap();
    }
    s
}

pub const ED_PROFILE_HEADER: &str = "block,ed_d,ed_c_mean,ed_c_std,ratio,dims";
pub const INFO_HEADER: &str =
    "block,i_tot,i_lin_absorbed,i_cor,se,i_lin,i_sigsim,se_cor,i_tot_bits,i_lin_absorbed_bits,i_cor_bits,mc_samples";
pub const PROBE_HEADER: &str = "block,accuracy";

pub fn ed_profile_csv(rows: &[EdProfileRow]) -> String {
    let mut s = format!("{ED_PROFILE_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{},{}", r.block, r.ed_d, r.ed_c_mean, r.ed_c_std, r.ratio, r.dims).unwrap();
    }
    s
}

/// Rows of (1-based block, breakdown).
pub fn info_csv(rows: &[(usize, InfoBreakdown)]) -> String {
    let mut s = format!("{INFO_HEADER}\n");
    for (block, r) in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            block,
            r.i_tot,
            r.i_lin_absorbed,
            r.i_cor,
            r.se_tot,
            r.i_lin,
            r.i_sigsim,
            r.se_cor,
            bits(r.i_tot),
            bits(r.i_lin_absorbed),
            bits(r.i_cor),
            r.mc_samples
        )
        .unwrap();
    }
    s
}

/// Rows of (1-based block, accuracy).
pub fn probe_csv(rows: &[(usize, f64)]) -> String {
    let mut s = format!("{PROBE_HEADER}\n");
    for (block, acc) in rows {
        writeln!(s, "{block},{acc}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Split;
    use crate::trainer::tests::{toy_config, toy_context, toy_data};
    use crate::trainer::{train_phase1, train_phase2};

    fn trained() -> (TrainState<f64>, DataContext) {
        let mut cfg = toy_config();
        cfg.phase2_epochs = 3;
        let data = toy_context(&cfg);
        let mut st = TrainState::<f64>::new(cfg).unwrap();
        train_phase1(&mut st, &data, &mut |_, _| Ok(())).unwrap();
        (st, data)
    }

    #[test]
    fn probe_on_last_block_equals_classifier_training() {
        let (mut st, data) = trained();
        let mut frozen = st.network.clone();
        let cfg = st.config.clone();
        let acc = train_phase2(&mut st, &data, &mut [], &mut |_, _| Ok(())).unwrap();
        let probes = linear_probes(&mut frozen, &[2], &data, &cfg).unwrap();
        assert_eq!(probes[0].block, 3);
        assert_eq!(probes[0].accuracy, acc);
        assert_eq!(probes[0].head.weight.value, st.network.classifier.weight.value);
        assert_eq!(probes[0].head.bias.value, st.network.classifier.bias.value);
    }

    #[test]
    fn profile_values_lie_within_bounds() {
        let (mut st, data) = trained();
        let cfg = st.config.clone();
        let rows = layer_ed_profile(&mut st.network, &st.bases, &data.val, &data.preprocess, &cfg, 3).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            for ed in [r.ed_d, r.ed_c_mean] {
                assert!(ed >= 1.0 - 1e-9 && ed <= r.dims as f64 + 1e-9, "{r:?}");
            }
            assert!(r.ed_c_std >= 0.0);
            assert_eq!(r.ratio, r.ed_d / r.ed_c_mean);
        }
        assert_eq!(rows.iter().map(|r| r.dims).collect::<Vec<_>>(), [3, 8, 16]);
        let csv = ed_profile_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("block,ed_d,ed_c_mean,ed_c_std,ratio"));
    }

    #[test]
    fn strategies_agree_without_dropout() {
        let mut cfg = toy_config();
        cfg.network.sample_dropout = 0.0;
        let mut st = TrainState::<f64>::new(cfg).unwrap();
        let x: Tensor<f64> = toy_data(4, Split::Val, 9).images.cast();
        let mut rng = stream(0, &[]);
        let ms = predict_scores(&mut st.network, &x, ScoreStrategy::MeanSquare, 3, &mut rng).unwrap();
        let mean = predict_scores(&mut st.network, &x, ScoreStrategy::Mean, 3, &mut rng).unwrap();
        let direct = predict_scores(&mut st.network, &x, ScoreStrategy::Direct, 3, &mut rng).unwrap();
        assert_eq!(ms.scores.shape(), &[4, 10]);
        for ((&a, &b), &c) in ms.scores.data().iter().zip(mean.scores.data()).zip(direct.scores.data()) {
            assert!(a >= 0.0);
            assert!((a - b * b).abs() < 1e-12);
            assert!((b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluation_ignores_dataset_order() {
        let (mut st, data) = trained();
        let cfg = st.config.clone();
        let mut cfg1 = cfg.clone();
        cfg1.network.sample_dropout = 0.0;
        let order: Vec<usize> = (0..data.val.len()).rev().collect();
        let shuffled = data.val.subset(&order);
        let a = evaluate(&mut st.network, &data.val, &data.preprocess, &cfg1, ScoreStrategy::Direct, 1).unwrap();
        let b = evaluate(&mut st.network, &shuffled, &data.preprocess, &cfg1, ScoreStrategy::Direct, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn readout_breakdown_on_toy_scores() {
        let (mut st, data) = trained();
        let cfg = st.config.clone();
        let head = st.network.classifier.clone();
        let train = data.train.clone();
        let r = readout_info(&mut st.network, &head, 2, &train, &data.preprocess, &cfg, 2_000, 5).unwrap();
        assert_eq!(r.i_cor, r.i_tot - r.i_lin - r.i_sigsim);
        assert!(r.i_tot < 2f64.ln() + 3.0 * r.se_tot);
        let csv = info_csv(&[(3, r)]);
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), INFO_HEADER.split(',').count());
        assert_eq!(probe_csv(&[(1, 0.5)]), "block,accuracy\n1,0.5\n");
    }

    #[test]
    fn sweep_scores_each_alpha() {
        let cfg = toy_config();
        let data = toy_context(&cfg);
        let rows = alpha_sweep::<f64>(&cfg, &data, &[0.2, 1.0], 0).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.cos >= 1.0 / 4.0 && r.cos <= 7.0 / 4.0, "{r:?}");
            assert!(r.kernel_std > 0.0 && r.loss.is_finite());
        }
        assert_eq!(sweep_csv(&rows).lines().count(), 3);
    }
}
