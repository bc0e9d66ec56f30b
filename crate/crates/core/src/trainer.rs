//! Two-phase training: layer-local compression objective per block, then a
//! linear classifier on frozen features. Also the end-to-end baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::{sidecar_path, Container, StoredTensor, FORMAT_VERSION};
use crate::config::{Phase1Order, RunConfig, TrainMode};
use crate::dataio::{batch_indices, load_dataset, zca_fit, Dataset, Preprocess};
use crate::error::{Error, Result};
use crate::goodness::{consistency_groups, dc_objective, haar_basis_for_block, ProjectionBasis, Supervision};
use crate::network::{build_network, score, Classifier, Network, Regime, Sampling, ScoreStrategy};
use crate::ops::{argmax_rows, BatchNormState};
use crate::optim::{cosine_lr, AdamState, AdamW};
use crate::scalar::Scalar;
use crate::seeds::{derive_seed, stream, Seeds};
use crate::tensor::Tensor;

/// Stream tags separating the random sources of each stage.
pub(crate) mod tag {
    pub const PHASE1: u64 = 1;
    pub const PHASE2: u64 = 2;
    pub const BP: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const FEATURES: u64 = 5;
    pub const HEAD: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const PROJECTION: u64 = 8;
}

pub const INIT_SCHEME: &str =
    "conv: kaiming_uniform(a=sqrt(5)) = U(+-1/sqrt(fan_in)); linear: U(+-1/sqrt(in_dims)), zero bias";

/// Training and validation data with their preprocessing.
#[derive(Clone, Debug)]
pub struct DataContext {
    pub train: Dataset,
    pub val: Dataset,
    pub preprocess: Preprocess,
}

impl DataContext {
    /// Loads the configured dataset, applies subsets and fits whitening on
    /// the training split.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (train, val) = load_dataset(&cfg.data.dir, cfg.network.dataset)?;
        Self::from_datasets(cfg, train, val)
    }

    pub fn from_datasets(cfg: &RunConfig, train: Dataset, val: Dataset) -> Result<Self> {
        let train = match cfg.data.train_subset {
            Some(n) => train.take(n),
            None => train,
        };
        let val = match cfg.data.val_subset {
            Some(n) => val.take(n),
            None => val,
        };
        let expect = cfg.network.dataset.input_shape();
        if train.image_shape() != expect || val.image_shape() != expect {
            return Err(Error::Format(format!(
                "dataset images are {:?}, network expects {:?}",
                train.image_shape(),
                expect
            )));
        }
        let kind = cfg.network.dataset;
        let zca = if cfg.data.zca_for(kind) { Some(zca_fit(&train, cfg.data.zca_eps)?) } else { None };
        let augment = Some(cfg.data.augment_for(kind)).filter(|a| !a.is_identity());
        Ok(DataContext { train, val, preprocess: Preprocess { augment, zca } })
    }
}

/// Completed work, used to resume.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Number of (epoch, block) units of phase 1 finished.
    pub phase1_units: usize,
    pub bp_epochs: usize,
    pub phase2_epochs: usize,
    pub best_val_acc: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: &'static str,
    pub block: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,phase,block,loss,lr,val_acc";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let acc = self.val_acc.map(|a| a.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.epoch, self.phase, self.block, self.loss, self.lr, acc)
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub config: RunConfig,
    pub network: Network<T>,
    /// Fixed per-block projections (`None` when projecting is disabled).
    pub bases: Vec<Option<ProjectionBasis>>,
    pub optimizer: AdamW<T>,
    pub progress: Progress,
    pub best_classifier: Option<Classifier<T>>,
}

/// Losses of one pass of [`train_block`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockTrace {
    pub loss: Vec<f64>,
    pub ed_c: Vec<f64>,
    pub ed_d: Vec<f64>,
}

impl BlockTrace {
    pub fn mean_loss(&self) -> f64 {
        if self.loss.is_empty() {
            return f64::NAN;
        }
        self.loss.iter().sum::<f64>() / self.loss.len() as f64
    }
}

/// Projection bases for every block, each seeded from the projection seed
/// and its block index.
pub fn make_bases(cfg: &RunConfig) -> Result<Vec<Option<ProjectionBasis>>> {
    let channels = cfg.network.channels()?;
    cfg.projection_dims()?
        .into_iter()
        .enumerate()
        .map(|(l, k)| {
            k.map(|k| haar_basis_for_block(k, channels[l], derive_seed(cfg.seeds.projection, &[tag::PROJECTION, l as u64]), l))
                .transpose()
        })
        .collect()
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let network = build_network(&config.network, config.seeds.init)?;
        let bases = make_bases(&config)?;
        Ok(TrainState { config, network, bases, optimizer: AdamW::new(), progress: Progress::default(), best_classifier: None })
    }

    pub fn seeds(&self) -> Seeds {
        self.config.seeds
    }

    fn basis_tensor(&self, l: usize) -> Option<Tensor<T>> {
        self.bases[l].as_ref().map(|b| b.matrix.cast())
    }

    /// Phase-1 work units in execution order.
    pub fn phase1_schedule(&self) -> Vec<(usize, usize)> {
        let (e, b) = (self.config.phase1_epochs, self.network.n_blocks());
        match self.config.phase1_order {
            Phase1Order::Interleaved => (0..e).flat_map(|e| (0..b).map(move |l| (e, l))).collect(),
            Phase1Order::Sequential => (0..b).flat_map(|l| (0..e).map(move |e| (e, l))).collect(),
        }
    }
}

/// One pass of block `l` over the training set with the compression
/// objective. Earlier blocks run frozen; only block `l`'s kernel is updated.
pub fn train_block<T: Scalar>(state: &mut TrainState<T>, l: usize, epoch: usize, data: &DataContext) -> Result<BlockTrace> {
    let cfg = state.config.clone();
    if l >= state.network.n_blocks() {
        return Err(Error::InvalidArgument(format!("block index {l} out of range")));
    }
    let channels = state.network.block_output_shape(l)?[0];
    if let Some(b) = &state.bases[l] {
        if b.k() > channels || b.d() != channels {
            return Err(Error::InvalidArgument(format!(
                "projection {}×{} does not fit block {} with {} channels",
                b.k(),
                b.d(),
                l + 1,
                channels
            )));
        }
    }
    let lr = cosine_lr(epoch, cfg.phase1_t_max(), cfg.optimizer.lr, cfg.schedule.lr_min)?;
    let seeds = cfg.seeds;
    let tags = [tag::PHASE1, epoch as u64, l as u64];
    let batches = batch_indices(data.train.len(), cfg.batch_size, true, derive_seed(seeds.data, &tags), 0)?;
    let mut aug_rng = stream(seeds.data, &[tag::AUGMENT, tag::PHASE1, epoch as u64, l as u64]);
    let mut noise_rng = stream(seeds.noise, &tags);
    let basis = state.basis_tensor(l);
    let sup = cfg.goodness.supervision;
    let sampling = match sup {
        Supervision::Sup => Sampling::Clean,
        _ => Sampling::Noisy(cfg.n_copies()),
    };
    let weight_name = state.network.blocks[l].weight.name.clone();
    let mut trace = BlockTrace::default();
    for idx in batches {
        let (raw, labels) = data.train.gather(&idx);
        let labels = if sup == Supervision::Unsup { None } else { Some(labels) };
        if let Some(lab) = &labels {
            if consistency_groups(lab.len(), 2, sup, Some(lab)).is_err() {
                log::warn!("skipping a batch without two inputs of the same class");
                continue;
            }
        }
        let x: Tensor<T> = data.preprocess.batch(&raw, true, &mut aug_rng)?;
        let mut g = Graph::new();
        let feats = state.network.features_forward(&mut g, &x, Regime::TrainBlock(l), sampling, l, &mut noise_rng)?;
        let act = feats.unfold(&mut g)?;
        let terms = dc_objective(&mut g, act, basis.as_ref(), cfg.goodness.alpha, cfg.goodness.eps, sup, labels.as_deref())?;
        g.backward(terms.loss)?;
        let grad = g
            .param_grad(&weight_name)
            .ok_or_else(|| Error::InvalidArgument(format!("{weight_name} was not tracked")))?;
        state.optimizer.step(&mut state.network.blocks[l].weight, &grad, lr, &cfg.optimizer)?;
        trace.loss.push(g.value(terms.loss).item()?.to_f64_lossy());
        trace.ed_c.push(g.value(terms.ed_c).item()?.to_f64_lossy());
        trace.ed_d.push(g.value(terms.ed_d).item()?.to_f64_lossy());
    }
    Ok(trace)
}

/// Callback invoked after every completed unit of work with the state and
/// the metrics row it produced.
pub type Observer<'a, T> = dyn FnMut(&TrainState<T>, &MetricsRow) -> Result<()> + 'a;

/// Layer-local training of all blocks, resuming after the completed units.
pub fn train_phase1<T: Scalar>(state: &mut TrainState<T>, data: &DataContext, observe: &mut Observer<'_, T>) -> Result<()> {
    let schedule = state.phase1_schedule();
    for (i, &(epoch, l)) in schedule.iter().enumerate().skip(state.progress.phase1_units) {
        let trace = train_block(state, l, epoch, data)?;
        let lr = cosine_lr(epoch, state.config.phase1_t_max(), state.config.optimizer.lr, state.config.schedule.lr_min)?;
        state.progress.phase1_units = i + 1;
        log::info!(
            "phase 1 epoch {} block {}: loss {:.4} (ED_c {:.3}, ED_d {:.3})",
            epoch + 1,
            l + 1,
            trace.mean_loss(),
            mean(&trace.ed_c),
            mean(&trace.ed_d)
        );
        let row = MetricsRow { epoch: epoch + 1, phase: "phase1", block: l + 1, loss: trace.mean_loss(), lr, val_acc: None };
        observe(state, &row)?;
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// A classifier trained on frozen features of one block.
#[derive(Clone, Debug)]
pub struct HeadJob<T> {
    pub label: String,
    /// 0-based block whose output feeds the head.
    pub block: usize,
    pub strategy: ScoreStrategy,
    pub head: Classifier<T>,
    pub optimizer: AdamW<T>,
    pub best: Option<Classifier<T>>,
    pub best_acc: f64,
    pub best_epoch: usize,
    pub history: Vec<MetricsRow>,
}

fn strategy_code(s: ScoreStrategy) -> u64 {
    match s {
        ScoreStrategy::MeanSquare => 0,
        ScoreStrategy::Mean => 1,
        ScoreStrategy::Direct => 2,
    }
}

/// Freshly initialized head for block `block`, seeded by (init seed, block, strategy).
pub fn fresh_head<T: Scalar>(
    cfg: &RunConfig,
    network: &Network<T>,
    name: &str,
    block: usize,
    strategy: ScoreStrategy,
) -> Result<Classifier<T>> {
    let [c, h, w] = network.block_output_shape(block)?;
    let mut rng = stream(cfg.seeds.init, &[tag::HEAD, block as u64, strategy_code(strategy)]);
    Ok(Classifier::new(name, c * h * w, cfg.network.n_classes(), cfg.network.classifier_dropout, &mut rng))
}

impl<T: Scalar> HeadJob<T> {
    pub fn new(cfg: &RunConfig, network: &Network<T>, label: &str, block: usize, strategy: ScoreStrategy) -> Result<Self> {
        Ok(HeadJob {
            label: label.to_string(),
            block,
            strategy,
            head: fresh_head(cfg, network, label, block, strategy)?,
            optimizer: AdamW::new(),
            best: None,
            best_acc: f64::NEG_INFINITY,
            best_epoch: 0,
            history: Vec::new(),
        })
    }

    fn seed_tag(&self) -> u64 {
        derive_seed(self.block as u64, &[strategy_code(self.strategy)])
    }
}

/// One epoch of every head on shared frozen features, followed by a
/// validation pass. Each head draws its own dropout stream, so its trajectory
/// does not depend on which other heads are trained alongside it.
pub fn heads_epoch<T: Scalar>(
    network: &mut Network<T>,
    cfg: &RunConfig,
    data: &DataContext,
    jobs: &mut [HeadJob<T>],
    epoch: usize,
) -> Result<()> {
    if jobs.is_empty() {
        return Ok(());
    }
    let lr = cosine_lr(epoch, cfg.phase2_t_max(), cfg.optimizer.lr, cfg.schedule.lr_min)?;
    let seeds = cfg.seeds;
    let e = epoch as u64;
    let batches = batch_indices(data.train.len(), cfg.batch_size, true, derive_seed(seeds.data, &[tag::PHASE2, e]), 0)?;
    let mut aug_rng = stream(seeds.data, &[tag::AUGMENT, tag::PHASE2, e]);
    let mut noise_rng = stream(seeds.noise, &[tag::PHASE2, e, tag::FEATURES]);
    let mut head_rngs: Vec<_> = jobs.iter().map(|j| stream(seeds.noise, &[tag::PHASE2, e, tag::HEAD, j.seed_tag()])).collect();
    let noisy_top = jobs.iter().filter(|j| j.strategy != ScoreStrategy::Direct).map(|j| j.block).max();
    let clean_top = jobs.iter().filter(|j| j.strategy == ScoreStrategy::Direct).map(|j| j.block).max();
    let mut sums = vec![0.0; jobs.len()];
    let n_batches = batches.len();
    for idx in batches {
        let (raw, labels) = data.train.gather(&idx);
        let x: Tensor<T> = data.preprocess.batch(&raw, true, &mut aug_rng)?;
        let mut g = Graph::new();
        let noisy = match noisy_top {
            Some(top) => {
                network.features_forward_all(&mut g, &x, Regime::Frozen, Sampling::Noisy(cfg.n_copies()), top, &mut noise_rng)?
            }
            None => Vec::new(),
        };
        let clean = match clean_top {
            Some(top) => network.features_forward_all(&mut g, &x, Regime::Frozen, Sampling::Clean, top, &mut noise_rng)?,
            None => Vec::new(),
        };
        for (j, job) in jobs.iter_mut().enumerate() {
            let feats = if job.strategy == ScoreStrategy::Direct { clean[job.block] } else { noisy[job.block] };
            let logits = job.head.forward(&mut g, feats, true, true, &mut head_rngs[j])?;
            let s = score(&mut g, logits, job.strategy)?;
            let loss = g.softmax_cross_entropy(s, &labels)?;
            g.backward(loss)?;
            sums[j] += g.value(loss).item()?.to_f64_lossy();
            let gw = g.param_grad(&job.head.weight.name).expect("head weight tracked");
            let gb = g.param_grad(&job.head.bias.name).expect("head bias tracked");
            job.optimizer.step(&mut job.head.weight, &gw, lr, &cfg.optimizer)?;
            job.optimizer.step(&mut job.head.bias, &gb, lr, &cfg.optimizer)?;
        }
    }
    let heads: Vec<(&Classifier<T>, usize, ScoreStrategy)> = jobs.iter().map(|j| (&j.head, j.block, j.strategy)).collect();
    let accs = evaluate_heads(network, &heads, &data.val, &data.preprocess, cfg, derive_seed(seeds.noise, &[tag::EVAL, e]))?;
    for (j, job) in jobs.iter_mut().enumerate() {
        let acc = accs[j];
        if acc > job.best_acc {
            job.best_acc = acc;
            job.best_epoch = epoch + 1;
            job.best = Some(job.head.clone());
        }
        job.history.push(MetricsRow {
            epoch: epoch + 1,
            phase: "phase2",
            block: job.block + 1,
            loss: sums[j] / n_batches as f64,
            lr,
            val_acc: Some(acc),
        });
        log::info!("{} epoch {}: loss {:.4}, val acc {:.4}", job.label, epoch + 1, sums[j] / n_batches as f64, acc);
    }
    Ok(())
}

/// Accuracy of several heads on one split, sharing the frozen feature passes.
/// Ties in the class scores go to the lowest class index.
pub fn evaluate_heads<T: Scalar>(
    network: &mut Network<T>,
    heads: &[(&Classifier<T>, usize, ScoreStrategy)],
    dataset: &Dataset,
    preprocess: &Preprocess,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut correct = vec![0usize; heads.len()];
    let batches = batch_indices(dataset.len(), cfg.batch_size, false, 0, 0)?;
    let mut rng = stream(seed, &[]);
    let noisy_top = heads.iter().filter(|h| h.2 != ScoreStrategy::Direct).map(|h| h.1).max();
    let clean_top = heads.iter().filter(|h| h.2 == ScoreStrategy::Direct).map(|h| h.1).max();
    for idx in batches {
        let (raw, labels) = dataset.gather(&idx);
        let x: Tensor<T> = preprocess.batch(&raw, false, &mut rng)?;
        let mut g = Graph::new();
        let noisy = match noisy_top {
            Some(top) => network.features_forward_all(&mut g, &x, Regime::Frozen, Sampling::Noisy(cfg.n_copies()), top, &mut rng)?,
            None => Vec::new(),
        };
        let clean = match clean_top {
            Some(top) => network.features_forward_all(&mut g, &x, Regime::Frozen, Sampling::Clean, top, &mut rng)?,
            None => Vec::new(),
        };
        for (j, &(head, block, strategy)) in heads.iter().enumerate() {
            let feats = if strategy == ScoreStrategy::Direct { clean[block] } else { noisy[block] };
            let logits = head.forward(&mut g, feats, false, false, &mut rng)?;
            let s = score(&mut g, logits, strategy)?;
            let pred = argmax_rows(g.value(s))?;
            correct[j] += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
    }
    Ok(correct.iter().map(|&c| c as f64 / dataset.len() as f64).collect())
}

fn phase2_job<T: Scalar>(state: &mut TrainState<T>) -> Result<HeadJob<T>> {
    let cfg = state.config.clone();
    let last = state.network.n_blocks() - 1;
    let mut job = HeadJob::new(&cfg, &state.network, "classifier", last, cfg.score)?;
    if state.progress.phase2_epochs > 0 {
        job.head = state.network.classifier.clone();
        job.optimizer.states = state.optimizer.states.iter().filter(|(k, _)| k.starts_with("classifier.")).map(|(k, v)| (k.clone(), v.clone())).collect();
        job.best = state.best_classifier.clone();
        job.best_acc = state.progress.best_val_acc.unwrap_or(f64::NEG_INFINITY);
        job.best_epoch = state.progress.best_epoch.unwrap_or(0);
    } else {
        state.optimizer.reset("classifier.");
    }
    Ok(job)
}

/// Trains the classifier on frozen features for `phase2_epochs`, together
/// with any `extra` heads (probes, other scoring rules). Keeps the best
/// validation classifier and installs it in the network at the end.
pub fn train_phase2<T: Scalar>(
    state: &mut TrainState<T>,
    data: &DataContext,
    extra: &mut [HeadJob<T>],
    observe: &mut Observer<'_, T>,
) -> Result<f64> {
    let cfg = state.config.clone();
    let mut main = phase2_job(state)?;
    let start = state.progress.phase2_epochs;
    if start > 0 && !extra.is_empty() {
        log::warn!("extra heads start from scratch on a resumed phase 2 and see only its remaining epochs");
    }
    for epoch in start..cfg.phase2_epochs {
        let mut jobs: Vec<HeadJob<T>> = Vec::with_capacity(1 + extra.len());
        jobs.push(main);
        jobs.extend(extra.iter().cloned());
        heads_epoch(&mut state.network, &cfg, data, &mut jobs, epoch)?;
        let mut it = jobs.into_iter();
        main = it.next().expect("main head");
        for (slot, job) in extra.iter_mut().zip(it) {
            *slot = job;
        }
        state.network.classifier = main.head.clone();
        state.optimizer.reset("classifier.");
        for (k, v) in &main.optimizer.states {
            state.optimizer.states.insert(k.clone(), v.clone());
        }
        state.best_classifier = main.best.clone();
        state.progress.best_val_acc = Some(main.best_acc);
        state.progress.best_epoch = Some(main.best_epoch);
        state.progress.phase2_epochs = epoch + 1;
        let row = main.history.last().expect("row per epoch").clone();
        observe(state, &row)?;
    }
    if let Some(best) = &state.best_classifier {
        state.network.classifier = best.clone();
    }
    Ok(state.progress.best_val_acc.unwrap_or(f64::NAN))
}

/// End-to-end cross-entropy training of blocks and classifier through the
/// same noisy-copy scoring path, for `phase1_epochs`.
pub fn train_bp<T: Scalar>(state: &mut TrainState<T>, data: &DataContext, observe: &mut Observer<'_, T>) -> Result<()> {
    let cfg = state.config.clone();
    let seeds = cfg.seeds;
    let last = state.network.n_blocks() - 1;
    for epoch in state.progress.bp_epochs..cfg.phase1_epochs {
        let e = epoch as u64;
        let lr = cosine_lr(epoch, cfg.phase1_t_max(), cfg.optimizer.lr, cfg.schedule.lr_min)?;
        let batches = batch_indices(data.train.len(), cfg.batch_size, true, derive_seed(seeds.data, &[tag::BP, e]), 0)?;
        let mut aug_rng = stream(seeds.data, &[tag::AUGMENT, tag::BP, e]);
        let mut noise_rng = stream(seeds.noise, &[tag::BP, e]);
        let mut total = 0.0;
        let n_batches = batches.len();
        for idx in batches {
            let (raw, labels) = data.train.gather(&idx);
            let x: Tensor<T> = data.preprocess.batch(&raw, true, &mut aug_rng)?;
            let mut g = Graph::new();
            let feats =
                state.network.features_forward(&mut g, &x, Regime::EndToEnd, Sampling::Noisy(cfg.n_copies()), last, &mut noise_rng)?;
            let logits = state.network.classifier_forward(&mut g, feats, true, true, &mut noise_rng)?;
            let s = score(&mut g, logits, cfg.score)?;
            let loss = g.softmax_cross_entropy(s, &labels)?;
            g.backward(loss)?;
            total += g.value(loss).item()?.to_f64_lossy();
            let names: Vec<String> = g.tracked_params().iter().map(|(n, _)| n.clone()).collect();
            for name in names {
                let grad = g.param_grad(&name).expect("tracked");
                let p = param_mut(&mut state.network, &name)?;
                state.optimizer.step(p, &grad, lr, &cfg.optimizer)?;
            }
        }
        state.progress.bp_epochs = epoch + 1;
        let row = MetricsRow { epoch: epoch + 1, phase: "bp", block: 0, loss: total / n_batches as f64, lr, val_acc: None };
        log::info!("end-to-end epoch {}: loss {:.4}", epoch + 1, row.loss);
        observe(state, &row)?;
    }
    Ok(())
}

fn param_mut<'a, T: Scalar>(net: &'a mut Network<T>, name: &str) -> Result<&'a mut crate::autodiff::Parameter<T>> {
    if let Some(b) = net.blocks.iter_mut().find(|b| b.weight.name == name) {
        return Ok(&mut b.weight);
    }
    if net.classifier.weight.name == name {
        return Ok(&mut net.classifier.weight);
    }
    if net.classifier.bias.name == name {
        return Ok(&mut net.classifier.bias);
    }
    Err(Error::InvalidArgument(format!("no parameter named {name}")))
}

/// Runs (or resumes) the configured pipeline and returns the best
/// validation accuracy of the classifier.
pub fn run<T: Scalar>(
    state: &mut TrainState<T>,
    data: &DataContext,
    extra: &mut [HeadJob<T>],
    observe: &mut Observer<'_, T>,
) -> Result<f64> {
    match state.config.mode {
        TrainMode::Ff => train_phase1(state, data, observe)?,
        TrainMode::Bp => train_bp(state, data, observe)?,
    }
    train_phase2(state, data, extra, observe)
}

/// Sidecar metadata of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub crate_version: String,
    pub dtype: String,
    pub init: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub progress: Progress,
    pub projections: Vec<Option<ProjectionMeta>>,
    pub optimizer_steps: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionMeta {
    pub k: usize,
    pub d: usize,
    pub seed: u64,
    pub block_index: usize,
}

fn push<T: Scalar>(c: &mut Container, name: &str, t: &Tensor<T>) {
    c.push(name, StoredTensor::from_scalar(t));
}

fn vec_tensor<T: Scalar>(v: &[T]) -> Tensor<T> {
    Tensor::from_vec(&[v.len()], v.to_vec()).expect("1-d")
}

impl<T: Scalar> TrainState<T> {
    /// Container and metadata describing this state.
    pub fn to_checkpoint(&self) -> (Container, CheckpointMeta) {
        let mut c = Container::default();
        for (i, b) in self.network.blocks.iter().enumerate() {
            push(&mut c, &b.weight.name, &b.weight.value);
            push(&mut c, &format!("block{}.bn.running_mean", i + 1), &vec_tensor(&b.bn.running_mean));
            push(&mut c, &format!("block{}.bn.running_var", i + 1), &vec_tensor(&b.bn.running_var));
        }
        for p in self.network.classifier.parameters() {
            push(&mut c, &p.name, &p.value);
        }
        if let Some(best) = &self.best_classifier {
            for p in best.parameters() {
                push(&mut c, &format!("best.{}", p.name), &p.value);
            }
        }
        for (i, b) in self.bases.iter().enumerate() {
            if let Some(b) = b {
                c.push(format!("block{}.projection", i + 1), StoredTensor::F64(b.matrix.clone()));
            }
        }
        for (name, s) in &self.optimizer.states {
            push(&mut c, &format!("adam.{name}.m"), &s.m);
            push(&mut c, &format!("adam.{name}.v"), &s.v);
        }
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            dtype: T::NAME.to_string(),
            init: INIT_SCHEME.to_string(),
            config: self.config.clone(),
            seeds: self.config.seeds,
            progress: self.progress.clone(),
            projections: self
                .bases
                .iter()
                .map(|b| b.as_ref().map(|b| ProjectionMeta { k: b.k(), d: b.d(), seed: b.seed, block_index: b.block_index }))
                .collect(),
            optimizer_steps: self.optimizer.states.iter().map(|(k, s)| (k.clone(), s.step)).collect(),
        };
        (c, meta)
    }

    pub fn from_checkpoint(c: &Container, meta: &CheckpointMeta) -> Result<Self> {
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "metadata version {} is not supported (expected {})",
                meta.format_version, FORMAT_VERSION
            )));
        }
        if meta.dtype != T::NAME {
            return Err(Error::Checkpoint(format!("checkpoint holds {} values, requested {}", meta.dtype, T::NAME)));
        }
        let mut state = TrainState::<T>::new(meta.config.clone())?;
        let load = |name: &str, like: &Tensor<T>| -> Result<Tensor<T>> {
            let t = c.get(name)?.to_scalar::<T>()?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), like.shape())));
            }
            Ok(t)
        };
        for (i, b) in state.network.blocks.iter_mut().enumerate() {
            b.weight.value = load(&b.weight.name, &b.weight.value)?;
            let ch = b.bn.channels();
            let like = Tensor::zeros(&[ch]);
            let mut bn = BatchNormState::new(ch);
            bn.running_mean = load(&format!("block{}.bn.running_mean", i + 1), &like)?.into_data();
            bn.running_var = load(&format!("block{}.bn.running_var", i + 1), &like)?.into_data();
            b.bn = bn;
        }
        let cls = &mut state.network.classifier;
        cls.weight.value = load(&cls.weight.name.clone(), &cls.weight.value)?;
        cls.bias.value = load(&cls.bias.name.clone(), &cls.bias.value)?;
        if c.get("best.classifier.weight").is_ok() {
            let mut best = state.network.classifier.clone();
            best.weight.value = load("best.classifier.weight", &best.weight.value)?;
            best.bias.value = load("best.classifier.bias", &best.bias.value)?;
            state.best_classifier = Some(best);
        }
        for (i, (b, m)) in state.bases.iter_mut().zip(&meta.projections).enumerate() {
            match (b.as_mut(), m) {
                (Some(b), Some(m)) => {
                    let t = c.get(&format!("block{}.projection", i + 1))?.to_scalar::<f64>()?;
                    if t.shape() != [m.k, m.d] {
                        return Err(Error::Checkpoint(format!("projection of block {} has the wrong shape", i + 1)));
                    }
                    *b = ProjectionBasis { matrix: t, seed: m.seed, block_index: m.block_index };
                }
                (None, None) => {}
                _ => return Err(Error::Checkpoint(format!("projection of block {} disagrees with the config", i + 1))),
            }
        }
        for (name, &step) in &meta.optimizer_steps {
            let m = c.get(&format!("adam.{name}.m"))?.to_scalar::<T>()?;
            let v = c.get(&format!("adam.{name}.v"))?.to_scalar::<T>()?;
            if m.shape() != v.shape() {
                return Err(Error::Checkpoint(format!("optimizer moments of {name} disagree in shape")));
            }
            state.optimizer.states.insert(name.clone(), AdamState { m, v, step });
        }
        state.progress = meta.progress.clone();
        Ok(state)
    }

    /// Writes the container to `path` and metadata to its `.meta.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (c, meta) = self.to_checkpoint();
        c.save(path)?;
        let mut json = serde_json::to_string_pretty(&meta)?;
        json.push('\n');
        fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let text = fs::read_to_string(sidecar_path(path))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        Self::from_checkpoint(&c, &meta)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataio::Split;
    use rand::Rng;

    /// Two classes of 28×28 images: bright left half or bright right half.
    pub fn toy_data(n: usize, split: Split, seed: u64) -> Dataset {
        let mut rng = stream(seed, &[]);
        let mut px = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            for _ in 0..28 {
                for x in 0..28 {
                    let on = (x < 14) == (c == 0);
                    px.push(if on { 0.6 } else { 0.1 } + 0.2 * rng.random::<f32>());
                }
            }
            labels.push(c);
        }
        Dataset::new("toy", split, Tensor::from_vec(&[n, 1, 28, 28], px).unwrap(), labels, 2).unwrap()
    }

    pub fn toy_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.network.channel_scale = 4.0 / 96.0;
        cfg.goodness.n_copies = 3;
        cfg.goodness.projection_dims = Some(vec![3, 8, 16]);
        cfg.phase1_epochs = 1;
        cfg.phase2_epochs = 2;
        cfg.batch_size = 16;
        cfg.data.augment = Some(crate::dataio::AugmentSpec { crop_padding: 0, hflip: false });
        cfg
    }

    pub fn toy_context(cfg: &RunConfig) -> DataContext {
        DataContext::from_datasets(cfg, toy_data(48, Split::Train, 1), toy_data(16, Split::Val, 2)).unwrap()
    }

    fn noop() -> impl FnMut(&TrainState<f64>, &MetricsRow) -> Result<()> {
        |_, _| Ok(())
    }

    #[test]
    fn phase1_only_moves_the_trained_block() {
        let cfg = toy_config();
        let data = toy_context(&cfg);
        let mut st = TrainState::<f64>::new(cfg).unwrap();
        let before = st.network.clone();
        let trace = train_block(&mut st, 1, 0, &data).unwrap();
        assert_eq!(trace.loss.len(), 3);
        assert!(trace.loss.iter().all(|l| l.is_finite()));
        assert_eq!(st.network.blocks[0].weight, before.blocks[0].weight);
        assert_ne!(st.network.blocks[1].weight, before.blocks[1].weight);
        assert_eq!(st.network.blocks[2].weight, before.blocks[2].weight);
        assert_eq!(st.network.classifier, before.classifier);
    }

    #[test]
    fn schedule_orders() {
        let mut cfg = toy_config();
        cfg.phase1_epochs = 2;
        let st = TrainState::<f32>::new(cfg.clone()).unwrap();
        assert_eq!(st.phase1_schedule()[..4], [(0, 0), (0, 1), (0, 2), (1, 0)]);
        cfg.phase1_order = Phase1Order::Sequential;
        let st = TrainState::<f32>::new(cfg).unwrap();
        assert_eq!(st.phase1_schedule()[..3], [(0, 0), (1, 0), (0, 1)]);
    }

    #[test]
    fn full_run_learns_toy_task_and_is_deterministic() {
        let mut cfg = toy_config();
        cfg.phase2_epochs = 8;
        cfg.optimizer.lr = 1e-2;
        let data = toy_context(&cfg);
        let mut a = TrainState::<f64>::new(cfg.clone()).unwrap();
        let mut rows = Vec::new();
        let acc = run(&mut a, &data, &mut [], &mut |_, r| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(rows.len(), 3 + 8);
        assert!(acc >= 0.9, "toy accuracy {acc}");
        let mut b = TrainState::<f64>::new(cfg).unwrap();
        run(&mut b, &data, &mut [], &mut noop()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = toy_config();
        let data = toy_context(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.sffc");
        let mut full = TrainState::<f64>::new(cfg.clone()).unwrap();
        run(&mut full, &data, &mut [], &mut noop()).unwrap();

        let mut part = TrainState::<f64>::new(cfg).unwrap();
        let mut saved = false;
        let _ = run(&mut part, &data, &mut [], &mut |s, r| {
            if r.phase == "phase2" && !saved {
                s.save(&path)?;
                saved = true;
                return Err(Error::InvalidArgument("interrupted".into()));
            }
            Ok(())
        });
        let mut resumed = TrainState::<f64>::load(&path).unwrap();
        assert_eq!(resumed.progress.phase2_epochs, 1);
        run(&mut resumed, &data, &mut [], &mut noop()).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn checkpoint_resave_is_byte_identical() {
        let cfg = toy_config();
        let data = toy_context(&cfg);
        let mut st = TrainState::<f32>::new(cfg).unwrap();
        train_phase1(&mut st, &data, &mut |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.sffc"), dir.path().join("b.sffc"));
        st.save(&p1).unwrap();
        let back = TrainState::<f32>::load(&p1).unwrap();
        assert_eq!(back, st);
        back.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(fs::read(sidecar_path(&p1)).unwrap(), fs::read(sidecar_path(&p2)).unwrap());
        assert!(TrainState::<f64>::load(&p1).is_err());
    }

    #[test]
    fn bp_baseline_updates_everything() {
        let mut cfg = toy_config();
        cfg.mode = TrainMode::Bp;
        let data = toy_context(&cfg);
        let mut st = TrainState::<f64>::new(cfg).unwrap();
        let before = st.network.clone();
        train_bp(&mut st, &data, &mut noop()).unwrap();
        for (a, b) in st.network.blocks.iter().zip(&before.blocks) {
            assert_ne!(a.weight, b.weight);
        }
        assert_ne!(st.network.classifier, before.classifier);
    }
}
