//! Three convolutional blocks and a linear head.
//!
//! | block | layers |
//! |-------|--------|
//! | 1 | BN (no affine) → dropout copies (p=0.2) → 5×5 conv, 96 ch, pad 2 → ReLU → 4×4 max pool, stride 2, pad 1 |
//! | 2 | BN → 3×3 depthwise conv ×4, pad 1 → ReLU → 4×4 max pool, stride 2, pad 1 |
//! | 3 | BN → 3×3 depthwise conv ×4, pad 1 → ReLU → 2×2 avg pool, stride 2 |
//! | head | flatten → dropout (p=0.5) → linear |
//!
//! Noisy copies are folded into the batch axis after block 1, so every later
//! layer (BN included) sees `B·N` rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Parameter, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::ops::{BatchNormState, Conv2dSpec, Mode, PoolMode, PoolSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    /// `[C, H, W]` of one image.
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => [3, 32, 32],
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            DatasetKind::Cifar100 => 100,
            _ => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub bn: bool,
    /// Copy-sampling dropout; nonzero only for the first block.
    pub dropout_p: f64,
    pub conv: ConvSpec,
    pub pool: PoolSpec,
}

impl BlockSpec {
    pub fn conv2d_spec(&self) -> Conv2dSpec {
        Conv2dSpec { stride: self.conv.stride, padding: self.conv.padding, groups: self.conv.groups }
    }

    /// `[Cout, Cin/groups, k, k]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        let c = &self.conv;
        [c.out_channels, self.in_channels / c.groups, c.kernel, c.kernel]
    }

    pub fn fan_in(&self) -> usize {
        let [_, cin, kh, kw] = self.weight_shape();
        cin * kh * kw
    }

    /// Spatial size after conv and pool.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let c = &self.conv;
        let conv = |n| crate::ops::conv::window_output_len(n, c.kernel, c.stride, c.padding);
        Ok((self.pool.output_len(conv(h)?)?, self.pool.output_len(conv(w)?)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub dataset: DatasetKind,
    /// Multiplies every channel count; 1/3 gives 32 → 128 → 512.
    pub channel_scale: f64,
    pub base_channels: usize,
    pub channel_multiplier: usize,
    pub sample_dropout: f64,
    pub classifier_dropout: f64,
    /// Checked against shape inference when given.
    pub classifier_in_dims: Option<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            dataset: DatasetKind::Mnist,
            channel_scale: 1.0,
            base_channels: 96,
            channel_multiplier: 4,
            sample_dropout: 0.2,
            classifier_dropout: 0.5,
            classifier_in_dims: None,
        }
    }
}

impl NetworkConfig {
    pub fn for_dataset(dataset: DatasetKind) -> Self {
        NetworkConfig { dataset, ..Default::default() }
    }

    pub fn n_classes(&self) -> usize {
        self.dataset.n_classes()
    }

    pub fn channels(&self) -> Result<[usize; 3]> {
        if !(self.channel_scale > 0.0) || !self.channel_scale.is_finite() {
            return Err(Error::Config(format!("channel_scale must be positive, got {}", self.channel_scale)));
        }
        let c1 = (self.base_channels as f64 * self.channel_scale).round() as usize;
        if c1 == 0 || self.channel_multiplier == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok([c1, c1 * self.channel_multiplier, c1 * self.channel_multiplier * self.channel_multiplier])
    }

    pub fn blocks(&self) -> Result<Vec<BlockSpec>> {
        let [c1, c2, c3] = self.channels()?;
        let in_c = self.dataset.input_shape()[0];
        let max4 = PoolSpec { mode: PoolMode::Max, kernel: 4, stride: 2, padding: 1 };
        let avg2 = PoolSpec { mode: PoolMode::Avg, kernel: 2, stride: 2, padding: 0 };
        Ok(vec![
            BlockSpec {
                in_channels: in_c,
                bn: true,
                dropout_p: self.sample_dropout,
                conv: ConvSpec { out_channels: c1, kernel: 5, stride: 1, padding: 2, groups: 1 },
                pool: max4,
            },
            BlockSpec {
                in_channels: c1,
                bn: true,
                dropout_p: 0.0,
                conv: ConvSpec { out_channels: c2, kernel: 3, stride: 1, padding: 1, groups: c1 },
                pool: max4,
            },
            BlockSpec {
                in_channels: c2,
                bn: true,
                dropout_p: 0.0,
                conv: ConvSpec { out_channels: c3, kernel: 3, stride: 1, padding: 1, groups: c2 },
                pool: avg2,
            },
        ])
    }

    /// `[C, H, W]` after each block.
    pub fn block_output_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let [_, mut h, mut w] = self.dataset.input_shape();
        let mut out = Vec::new();
        for b in self.blocks()? {
            (h, w) = b.output_hw(h, w)?;
            out.push([b.conv.out_channels, h, w]);
        }
        Ok(out)
    }

    pub fn inferred_classifier_dims(&self) -> Result<usize> {
        let shapes = self.block_output_shapes()?;
        let [c, h, w] = shapes[shapes.len() - 1];
        Ok(c * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        let inferred = self.inferred_classifier_dims()?;
        if let Some(declared) = self.classifier_in_dims {
            if declared != inferred {
                return Err(Error::Config(format!(
                    "classifier_in_dims {} does not match the block output ({} features)",
                    declared, inferred
                )));
            }
        }
        for (name, p) in [("sample_dropout", self.sample_dropout), ("classifier_dropout", self.classifier_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{} must lie in [0, 1), got {}", name, p)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub spec: BlockSpec,
    pub weight: Parameter<T>,
    pub bn: BatchNormState<T>,
}

/// Linear readout `[D] → [K]` with train-time dropout on its input.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub dropout_p: f64,
}

impl<T: Scalar> Classifier<T> {
    /// Weights `U(±1/√D)`, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, in_dims: usize, n_classes: usize, dropout_p: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dims as f64).sqrt();
        let w = uniform(&[n_classes, in_dims], bound, rng);
        Classifier {
            weight: Parameter::new(format!("{name}.weight"), w),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[n_classes])),
            dropout_p,
        }
    }

    pub fn in_dims(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn n_classes(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// Per-copy logits `[B, N, K]` from folded features.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        feats: Features,
        train: bool,
        track: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let rows = feats.batch * feats.copies;
        let d = g.value(feats.var).len() / rows.max(1);
        if d != self.in_dims() {
            return Err(shape_err!("classifier expects {} features, got {}", self.in_dims(), d));
        }
        let mut x = g.reshape(feats.var, &[rows, d])?;
        if train && self.dropout_p > 0.0 {
            x = g.dropout(x, self.dropout_p, rng)?;
        }
        let w = g.param(&self.weight, track);
        let b = g.param(&self.bias, track);
        let y = g.linear(x, w, b)?;
        g.reshape(y, &[feats.batch, feats.copies, self.n_classes()])
    }

    pub fn parameters(&self) -> [&Parameter<T>; 2] {
        [&self.weight, &self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub blocks: Vec<ConvBlock<T>>,
    pub classifier: Classifier<T>,
}

/// Whether the first block expands inputs into noisy copies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Noisy(usize),
    Clean,
}

impl Sampling {
    pub fn copies(self) -> usize {
        match self {
            Sampling::Noisy(n) => n,
            Sampling::Clean => 1,
        }
    }
}

/// Which parameters a forward pass trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Everything frozen, BN on running statistics.
    Frozen,
    /// Block `l` (0-based) in train mode; earlier blocks frozen and detached.
    TrainBlock(usize),
    /// All blocks in train mode with gradients flowing through.
    EndToEnd,
}

/// Block output with the copy axis folded into the batch: `[B·N, C, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub var: Var,
    pub batch: usize,
    pub copies: usize,
}

impl Features {
    /// View as `[B, N, C, H, W]`.
    pub fn unfold<T: Scalar>(self, g: &mut Graph<T>) -> Result<Var> {
        let s = g.value(self.var).shape().to_vec();
        g.reshape(self.var, &[self.batch, self.copies, s[1], s[2], s[3]])
    }
}

fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape and length agree")
}

/// Builds the network with weights drawn from a ChaCha8 stream seeded by `seed`.
///
/// Conv kernels use Kaiming-uniform with `a = √5`, i.e. `U(±1/√fan_in)`.
pub fn build_network<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    for (i, spec) in config.blocks()?.into_iter().enumerate() {
        let bound = 1.0 / (spec.fan_in() as f64).sqrt();
        let weight = Parameter::new(format!("block{}.conv.weight", i + 1), uniform(&spec.weight_shape(), bound, &mut rng));
        let bn = BatchNormState::new(spec.in_channels);
        blocks.push(ConvBlock { spec, weight, bn });
    }
    let classifier = Classifier::new(
        "classifier",
        config.inferred_classifier_dims()?,
        config.n_classes(),
        config.classifier_dropout,
        &mut rng,
    );
    Ok(Network { config: config.clone(), blocks, classifier })
}

impl<T: Scalar> Network<T> {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `[C, H, W]` output of block `l` (0-based).
    pub fn block_output_shape(&self, l: usize) -> Result<[usize; 3]> {
        self.config
            .block_output_shapes()?
            .get(l)
            .copied()
            .ok_or_else(|| invalid!("block index {} out of range", l))
    }

    /// Runs block `l` on `x`. Block 0 takes `[B, C, H, W]` images and applies
    /// copy sampling; later blocks take folded features.
    pub fn block_forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        l: usize,
        x: Features,
        bn_mode: Mode,
        track: bool,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Features> {
        let block = self.blocks.get_mut(l).ok_or_else(|| invalid!("block index {} out of range", l))?;
        let mut h = x.var;
        if block.spec.bn {
            h = g.batchnorm2d(h, &mut block.bn, bn_mode)?;
        }
        let mut out = x;
        if l == 0 {
            if x.copies != 1 {
                return Err(invalid!("first block expects un-copied images"));
            }
            let n = sampling.copies();
            if let Sampling::Noisy(n) = sampling {
                if n == 0 {
                    return Err(invalid!("number of noisy copies must be positive"));
                }
                h = g.dropout_copies(h, block.spec.dropout_p, n, rng)?;
            }
            let s = g.value(x.var).shape().to_vec();
            h = g.reshape(h, &[x.batch * n, s[1], s[2], s[3]])?;
            out.copies = n;
        }
        let w = g.param(&block.weight, track);
        h = g.conv_block(h, w, block.spec.conv2d_spec(), block.spec.pool)?;
        out.var = h;
        Ok(out)
    }

    /// Runs blocks `0..=stop_at` on a batch of images and returns the output
    /// of the last one.
    pub fn features_forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        images: &Tensor<T>,
        regime: Regime,
        sampling: Sampling,
        stop_at: usize,
        rng: &mut R,
    ) -> Result<Features> {
        let all = self.features_forward_all(g, images, regime, sampling, stop_at, rng)?;
        Ok(all[all.len() - 1])
    }

    /// Like [`Network::features_forward`] but returns every block's output.
    ///
    /// Blocks that need no gradient run on a scratch graph and only their
    /// output enters `g`, so frozen intermediates are freed immediately.
    pub fn features_forward_all<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        images: &Tensor<T>,
        regime: Regime,
        sampling: Sampling,
        stop_at: usize,
        rng: &mut R,
    ) -> Result<Vec<Features>> {
        if stop_at >= self.blocks.len() {
            return Err(invalid!("stop block {} out of range for {} blocks", stop_at, self.blocks.len()));
        }
        if let Regime::TrainBlock(l) = regime {
            if l != stop_at {
                return Err(invalid!("training block {} requires stopping at it, not at {}", l, stop_at));
            }
        }
        let [b, ..] = images.dims4()?;
        let mut f = Features { var: g.input(images.clone()), batch: b, copies: 1 };
        let mut out = Vec::with_capacity(stop_at + 1);
        for l in 0..=stop_at {
            let (mode, track) = match regime {
                Regime::Frozen => (Mode::Eval, false),
                Regime::TrainBlock(t) if t == l => (Mode::Train, true),
                Regime::TrainBlock(_) => (Mode::Eval, false),
                Regime::EndToEnd => (Mode::Train, true),
            };
            f = if track || g.requires_grad(f.var) {
                self.block_forward(g, l, f, mode, track, sampling, rng)?
            } else {
                let mut scratch = Graph::new();
                let x = Features { var: scratch.input(g.value(f.var).clone()), ..f };
                let y = self.block_forward(&mut scratch, l, x, mode, false, sampling, rng)?;
                let value = scratch.value(y.var).clone();
                drop(scratch);
                Features { var: g.input(value), ..y }
            };
            out.push(f);
        }
        Ok(out)
    }

    /// Per-copy logits `[B, N, K]` of the network's own head.
    pub fn classifier_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        feats: Features,
        train: bool,
        track: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.classifier.forward(g, feats, train, track, rng)
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out: Vec<&Parameter<T>> = self.blocks.iter().map(|b| &b.weight).collect();
        out.extend(self.classifier.parameters());
        out
    }
}

/// How per-copy logits are reduced to class scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreStrategy {
    /// `(1/N) Σ_j ŷ_j²`.
    #[default]
    MeanSquare,
    /// `(1/N) Σ_j ŷ_j`.
    Mean,
    /// One pass without copy sampling.
    Direct,
}

impl ScoreStrategy {
    pub fn sampling(self, copies: usize) -> Sampling {
        match self {
            ScoreStrategy::Direct => Sampling::Clean,
            _ => Sampling::Noisy(copies),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreStrategy::MeanSquare => "mean_square",
            ScoreStrategy::Mean => "mean",
            ScoreStrategy::Direct => "direct",
        }
    }
}

/// Class scores `[B, K]` from logits `[B, N, K]`.
pub fn score<T: Scalar>(g: &mut Graph<T>, logits: Var, strategy: ScoreStrategy) -> Result<Var> {
    match strategy {
        ScoreStrategy::MeanSquare => {
            let sq = g.square(logits)?;
            g.mean_axis1(sq)
        }
        ScoreStrategy::Mean | ScoreStrategy::Direct => g.mean_axis1(logits),
    }
}
