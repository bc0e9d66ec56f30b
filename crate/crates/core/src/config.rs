//! Run configuration and its layered resolution: defaults, then a JSON file,
//! then `dotted.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataio::{AugmentSpec, DEFAULT_ZCA_EPS};
use crate::error::{Error, Result};
use crate::goodness::{GoodnessConfig, ProjectionStrategy, Supervision};
use crate::network::{DatasetKind, NetworkConfig, ScoreStrategy};
use crate::seeds::Seeds;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: 1e-3, weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Cosine annealing stepped once per epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Period of the first phase; the phase length when absent.
    pub phase1_t_max: Option<usize>,
    pub phase2_t_max: Option<usize>,
    pub lr_min: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Layer-local compression objective, then a classifier.
    #[default]
    Ff,
    /// End-to-end cross-entropy, then a classifier refresh.
    Bp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase1Order {
    /// Every epoch visits blocks 1, 2, 3 in turn.
    #[default]
    Interleaved,
    /// All epochs of block 1, then block 2, then block 3.
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    /// Use only the first `n` training items.
    pub train_subset: Option<usize>,
    pub val_subset: Option<usize>,
    /// Dataset default (crop 2 for MNIST, crop 4 + flip for CIFAR) when absent.
    pub augment: Option<AugmentSpec>,
    /// Dataset default (CIFAR only) when absent.
    pub zca: Option<bool>,
    pub zca_eps: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data/mnist"),
            train_subset: None,
            val_subset: None,
            augment: None,
            zca: None,
            zca_eps: DEFAULT_ZCA_EPS,
        }
    }
}

impl DataConfig {
    pub fn augment_for(&self, kind: DatasetKind) -> AugmentSpec {
        self.augment.unwrap_or_else(|| AugmentSpec::for_dataset(kind))
    }

    pub fn zca_for(&self, kind: DatasetKind) -> bool {
        self.zca.unwrap_or(kind != DatasetKind::Mnist)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub goodness: GoodnessConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase1_order: Phase1Order,
    pub batch_size: usize,
    pub seeds: Seeds,
    pub mode: TrainMode,
    /// Class score used to train and evaluate the classifier.
    pub score: ScoreStrategy,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            goodness: GoodnessConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            phase1_epochs: 3,
            phase2_epochs: 60,
            phase1_order: Phase1Order::Interleaved,
            batch_size: 128,
            seeds: Seeds::default(),
            mode: TrainMode::Ff,
            score: ScoreStrategy::MeanSquare,
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn phase1_t_max(&self) -> usize {
        self.schedule.phase1_t_max.unwrap_or(self.phase1_epochs)
    }

    pub fn phase2_t_max(&self) -> usize {
        self.schedule.phase2_t_max.unwrap_or(self.phase2_epochs)
    }

    pub fn n_copies(&self) -> usize {
        self.goodness.n_copies
    }

    /// Per-block projection sizes, `None` for raw channels.
    ///
    /// Graded: 30-20-10 (90-150-100 for CIFAR-100). Fixed: the class count
    /// (90 for the first CIFAR-100 block, which has only 96 channels). Random:
    /// uniform in 10..=60 (100..=300 for CIFAR-100, first block 90), drawn from
    /// the projection seed. Defaults are clamped to the channel count; explicit
    /// sizes are not.
    pub fn projection_dims(&self) -> Result<Vec<Option<usize>>> {
        let channels = self.network.channels()?;
        let c100 = self.network.dataset == DatasetKind::Cifar100;
        if let Some(dims) = &self.goodness.projection_dims {
            if self.goodness.projection_strategy == ProjectionStrategy::None {
                return Err(Error::Config("projection_dims given with projection_strategy none".into()));
            }
            if dims.len() != channels.len() {
                return Err(Error::Config(format!("expected {} projection dims, got {}", channels.len(), dims.len())));
            }
            for (b, (&k, &c)) in dims.iter().zip(&channels).enumerate() {
                if k == 0 || k > c {
                    return Err(Error::Config(format!(
                        "projection dim {} of block {} must lie in 1..={} (its channel count)",
                        k,
                        b + 1,
                        c
                    )));
                }
            }
            return Ok(dims.iter().map(|&k| Some(k)).collect());
        }
        let base: Vec<usize> = match self.goodness.projection_strategy {
            ProjectionStrategy::None => return Ok(vec![None; channels.len()]),
            ProjectionStrategy::Graded if c100 => vec![90, 150, 100],
            ProjectionStrategy::Graded => vec![30, 20, 10],
            ProjectionStrategy::Fixed if c100 => vec![90, 100, 100],
            ProjectionStrategy::Fixed => vec![10; 3],
            ProjectionStrategy::Random => {
                use rand::Rng;
                let mut rng = crate::seeds::stream(self.seeds.projection, &[0x7261_6e64]);
                (0..channels.len())
                    .map(|b| match (c100, b) {
                        (true, 0) => 90,
                        (true, _) => rng.random_range(100..=300),
                        (false, _) => rng.random_range(10..=60),
                    })
                    .collect()
            }
        };
        Ok(base.iter().zip(&channels).map(|(&k, &c)| Some(k.min(c))).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let g = &self.goodness;
        if !(0.0..=1.0).contains(&g.alpha) {
            return Err(Error::Config(format!("goodness.alpha must lie in [0, 1], got {}", g.alpha)));
        }
        if g.n_copies == 0 {
            return Err(Error::Config("goodness.n_copies must be positive".into()));
        }
        if !(g.eps >= 0.0) {
            return Err(Error::Config(format!("goodness.eps must be nonnegative, got {}", g.eps)));
        }
        if g.supervision == Supervision::Unsup && g.n_copies < 2 && self.network.sample_dropout > 0.0 {
            log::warn!("a single noisy copy per input makes the consistency term purely spatial");
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if self.phase1_t_max() < self.phase1_epochs.saturating_sub(1) || self.phase2_t_max() < self.phase2_epochs.saturating_sub(1)
        {
            return Err(Error::Config("schedule period shorter than the phase".into()));
        }
        self.projection_dims()?;
        Ok(())
    }
}

/// Overlays `patch` onto `base`, rejecting keys `base` does not have.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(Error::Config(format!("unknown key `{sub}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn parse_override(raw: &str) -> Result<(Vec<String>, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{raw}` has an empty key")));
    }
    let value = value.trim();
    let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), parsed))
}

/// Applies a JSON document and overrides on top of the defaults.
pub fn resolve_value(file: Option<Value>, overrides: &[String]) -> Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::default())?;
    if let Some(doc) = file {
        if !doc.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        merge(&mut v, doc, "")?;
    }
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        let mut patch = value;
        for k in path.iter().rev() {
            let mut m = serde_json::Map::new();
            m.insert(k.clone(), patch);
            patch = Value::Object(m);
        }
        merge(&mut v, patch, "")?;
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (if any) and resolves it with `overrides`. An empty file
/// counts as `{}`.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            if text.trim().is_empty() {
                None
            } else {
                Some(serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?)
            }
        }
        None => None,
    };
    resolve_value(doc, overrides)
}
