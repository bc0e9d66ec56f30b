use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use stochff::analysis::{
    alpha_sweep, collect_scores, ed_profile_csv, info_csv, layer_ed_profile, linear_probes, probe_csv, readout_info,
    sweep_csv,
};
use stochff::checkpoint::{sidecar_path, Container, StoredTensor};
use stochff::config::{resolve_config, resolve_value, RunConfig};
use stochff::dataio::Dataset;
use stochff::network::{Classifier, ScoreStrategy};
use stochff::ops::dropout_copies;
use stochff::seeds::{derive_seed, stream};
use stochff::trainer::{fresh_head, metrics_csv, run as run_pipeline, CheckpointMeta, DataContext, MetricsRow, TrainState};
use stochff::{Error, Scalar, Tensor};

use crate::grid::{parse_grid, tile, Tiled};
use crate::{Cli, Common, Dtype, SplitArg, StrategyArg, Verb};

const CHECKPOINT: &str = "checkpoint.sffc";
const PROBES: &str = "probes.sffc";

// stream tags of the CLI's own random draws
const TAG_EVAL: u64 = 101;
const TAG_ED: u64 = 102;
const TAG_INFO: u64 = 103;
const TAG_NOISY: u64 = 104;

/// An error with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub err: Error,
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::Config(_) => 2,
            Error::Format(_) => 3,
            Error::NonFinite(_) => 4,
            _ => 1,
        };
        Failure { code, err }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Error::Config(msg.into()).into()
}

/// Errors while reading the dataset are data errors unless they are numeric.
fn data_err(err: Error) -> Failure {
    match err {
        Error::NonFinite(_) | Error::Config(_) => err.into(),
        err => Failure { code: 3, err },
    }
}

type Outcome = Result<(), Failure>;

macro_rules! dispatch {
    ($dtype:expr, $f:ident($($arg:expr),*)) => {
        match $dtype {
            Dtype::F32 => $f::<f32>($($arg),*),
            Dtype::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn run(cli: &Cli) -> Outcome {
    configure_threads()?;
    let c = &cli.common;
    fs::create_dir_all(&c.output_dir)?;
    match &cli.verb {
        Verb::PrepareData => prepare_data(c),
        Verb::Train { resume } => train(c, *resume),
        Verb::Eval { checkpoint, strategy, no_dump } => {
            let strategies = if strategy.is_empty() {
                vec![ScoreStrategy::MeanSquare, ScoreStrategy::Mean, ScoreStrategy::Direct]
            } else {
                strategy.iter().map(|&s| strategy_of(s)).collect()
            };
            let ck = Loaded::open(c, checkpoint.as_deref())?;
            dispatch!(ck.dtype, eval(c, &ck, &strategies, !no_dump))
        }
        Verb::AnalyzeEd { checkpoint, split } => {
            let ck = Loaded::open(c, checkpoint.as_deref())?;
            dispatch!(ck.dtype, analyze_ed(c, &ck, *split))
        }
        Verb::Probe { checkpoint, blocks } => {
            let ck = Loaded::open(c, checkpoint.as_deref())?;
            dispatch!(ck.dtype, probe(c, &ck, blocks))
        }
        Verb::AnalyzeInfo { checkpoint, blocks, mc_samples, split } => {
            let ck = Loaded::open(c, checkpoint.as_deref())?;
            dispatch!(ck.dtype, analyze_info(c, &ck, blocks, *mc_samples, *split))
        }
        Verb::SweepAlpha { grid, block } => dispatch!(c.dtype, sweep_alpha(c, grid, *block)),
        Verb::DumpNoisy { p_grid, count, scale } => dump_noisy(c, p_grid, *count, *scale),
    }
}

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("SFF_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| config_err(format!("SFF_THREADS must be a positive integer, got `{raw}`")))?;
    if n == 0 {
        return Err(config_err("SFF_THREADS must be at least 1"));
    }
    // a pool that already exists (tests calling twice) keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn strategy_of(s: StrategyArg) -> ScoreStrategy {
    match s {
        StrategyArg::MeanSquare => ScoreStrategy::MeanSquare,
        StrategyArg::Mean => ScoreStrategy::Mean,
        StrategyArg::Direct => ScoreStrategy::Direct,
    }
}

fn dtype_name(d: Dtype) -> &'static str {
    match d {
        Dtype::F32 => "f32",
        Dtype::F64 => "f64",
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Outcome {
    let mut s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Resolved configuration, seeds and invocation details next to the results.
fn describe(c: &Common, verb: &str, cfg: &RunConfig, dtype: Dtype) -> Outcome {
    let out = &c.output_dir;
    write_json(&out.join("resolved_config.json"), cfg)?;
    write_json(&out.join("seeds.json"), &cfg.seeds)?;
    let args: Vec<String> = std::env::args().collect();
    let run = json!({
        "verb": verb,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "dtype": dtype_name(dtype),
        "threads": rayon::current_num_threads(),
        "args": args,
    });
    write_json(&out.join(format!("run_{verb}.json")), &run)
}

fn fresh_config(c: &Common) -> Result<RunConfig, Failure> {
    Ok(resolve_config(c.config.as_deref(), &c.overrides)?)
}

fn split_of(data: &DataContext, s: SplitArg) -> &Dataset {
    match s {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
    }
}

fn prepare_data(c: &Common) -> Outcome {
    let cfg = fresh_config(c)?;
    let data = DataContext::load(&cfg).map_err(data_err)?;
    let summary = |d: &Dataset| {
        json!({
            "items": d.len(),
            "image_shape": d.image_shape(),
            "n_classes": d.n_classes,
            "class_counts": d.class_counts(),
        })
    };
    let report = json!({
        "dataset": cfg.network.dataset.name(),
        "dir": cfg.data.dir,
        "train": summary(&data.train),
        "val": summary(&data.val),
        "zca": data.preprocess.zca.is_some(),
    });
    log::info!("{} train / {} val items in {}", data.train.len(), data.val.len(), cfg.data.dir.display());
    describe(c, "prepare-data", &cfg, c.dtype)?;
    write_json(&c.output_dir.join("data_summary.json"), &report)
}

/// A checkpoint and the configuration the analysis verbs run with.
struct Loaded {
    path: PathBuf,
    meta: CheckpointMeta,
    dtype: Dtype,
    config: RunConfig,
}

impl Loaded {
    fn open(c: &Common, path: Option<&Path>) -> Result<Self, Failure> {
        let path = path.map(Path::to_path_buf).unwrap_or_else(|| c.output_dir.join(CHECKPOINT));
        let text = fs::read_to_string(sidecar_path(&path))
            .map_err(|e| Failure::from(Error::Checkpoint(format!("{}: {e}", sidecar_path(&path).display()))))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Failure::from(Error::Checkpoint(format!("metadata: {e}"))))?;
        let dtype = match meta.dtype.as_str() {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`")).into()),
        };
        if c.config.is_some() {
            return Err(config_err("--config cannot be combined with a checkpoint; use --overrides"));
        }
        let base = serde_json::to_value(&meta.config).map_err(Error::from)?;
        let config = resolve_value(Some(base), &c.overrides)?;
        if config.network != meta.config.network
            || config.goodness != meta.config.goodness
            || config.seeds != meta.config.seeds
            || config.mode != meta.config.mode
        {
            return Err(config_err("overrides may not change the network, goodness, seeds or mode of a checkpoint"));
        }
        Ok(Loaded { path, meta, dtype, config })
    }

    fn state<T: Scalar>(&self) -> Result<TrainState<T>, Failure> {
        let container = Container::load(&self.path)?;
        let mut state = TrainState::<T>::from_checkpoint(&container, &self.meta)?;
        state.config = self.config.clone();
        Ok(state)
    }
}

fn train(c: &Common, resume: bool) -> Outcome {
    let ckpt = c.output_dir.join(CHECKPOINT);
    if resume && sidecar_path(&ckpt).exists() {
        if c.config.is_some() {
            return Err(config_err("--config cannot be combined with --resume; use --overrides"));
        }
        let ck = Loaded::open(c, Some(&ckpt))?;
        return dispatch!(ck.dtype, train_with(c, Some(&ck), ck.config.clone()));
    }
    if resume {
        log::warn!("no checkpoint in {}, starting a new run", c.output_dir.display());
    }
    let cfg = fresh_config(c)?;
    dispatch!(c.dtype, train_with(c, None, cfg))
}

fn train_with<T: Scalar>(c: &Common, resumed: Option<&Loaded>, cfg: RunConfig) -> Outcome {
    let dtype = if T::NAME == "f64" { Dtype::F64 } else { Dtype::F32 };
    describe(c, "train", &cfg, dtype)?;
    let data = DataContext::load(&cfg).map_err(data_err)?;
    let mut state = match resumed {
        Some(ck) => ck.state::<T>()?,
        None => TrainState::<T>::new(cfg)?,
    };
    let ckpt = c.output_dir.join(CHECKPOINT);
    let metrics_path = c.output_dir.join("metrics.csv");
    let mut lines: Vec<String> = Vec::new();
    if resumed.is_some() {
        let p = &state.progress;
        let done = p.phase1_units + p.bp_epochs + p.phase2_epochs;
        if let Ok(text) = fs::read_to_string(&metrics_path) {
            lines = text.lines().skip(1).take(done).map(str::to_string).collect();
        }
        log::info!("resuming after {done} completed units");
    }
    let write_metrics = |lines: &[String]| -> Outcome {
        let mut s = metrics_csv(&[]);
        for l in lines {
            s.push_str(l);
            s.push('\n');
        }
        fs::write(&metrics_path, s)?;
        Ok(())
    };
    write_metrics(&lines)?;
    let mut observe = |st: &TrainState<T>, row: &MetricsRow| -> stochff::Result<()> {
        if !row.loss.is_finite() {
            return Err(Error::NonFinite(format!("{} loss at epoch {}", row.phase, row.epoch)));
        }
        lines.push(row.csv());
        write_metrics(&lines).map_err(|f| f.err)?;
        st.save(&ckpt)
    };
    let best = run_pipeline(&mut state, &data, &mut [], &mut observe)?;
    state.save(&ckpt)?;
    let summary = json!({
        "best_val_acc": best,
        "best_epoch": state.progress.best_epoch,
        "progress": state.progress,
    });
    log::info!("best validation accuracy {best:.4}");
    write_json(&c.output_dir.join("summary.json"), &summary)
}

fn eval<T: Scalar>(c: &Common, ck: &Loaded, strategies: &[ScoreStrategy], dump: bool) -> Outcome {
    let cfg = &ck.config;
    describe(c, "eval", cfg, ck.dtype)?;
    let data = DataContext::load(cfg).map_err(data_err)?;
    let mut state = ck.state::<T>()?;
    let head = state.network.classifier.clone();
    let last = state.network.n_blocks() - 1;
    let mut csv = String::from("strategy,accuracy\n");
    let mut container = Container::default();
    let mut labels_out = None;
    for (i, &s) in strategies.iter().enumerate() {
        let seed = derive_seed(cfg.seeds.noise, &[TAG_EVAL, i as u64]);
        let (scores, labels) = collect_scores(&mut state.network, &head, last, &data.val, &data.preprocess, cfg, s, seed)?;
        let k = head.n_classes();
        let correct = scores
            .chunks_exact(k)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        let acc = correct as f64 / labels.len().max(1) as f64;
        log::info!("{}: accuracy {acc:.4}", s.name());
        csv.push_str(&format!("{},{}\n", s.name(), acc));
        if dump {
            let t = Tensor::from_vec(&[labels.len(), k], scores)?;
            container.push(format!("scores.{}", s.name()), StoredTensor::F64(t));
        }
        labels_out = Some(labels);
    }
    fs::write(c.output_dir.join("eval.csv"), csv)?;
    if let (true, Some(labels)) = (dump, labels_out) {
        let l = Tensor::from_vec(&[labels.len()], labels.iter().map(|&y| y as f64).collect())?;
        container.push("labels", StoredTensor::F64(l));
        container.save(&c.output_dir.join("scores.sffc"))?;
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    // first maximum wins, as in the trainer
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn analyze_ed<T: Scalar>(c: &Common, ck: &Loaded, split: SplitArg) -> Outcome {
    let cfg = &ck.config;
    describe(c, "analyze-ed", cfg, ck.dtype)?;
    let data = DataContext::load(cfg).map_err(data_err)?;
    let mut state = ck.state::<T>()?;
    let seed = derive_seed(cfg.seeds.noise, &[TAG_ED]);
    let rows = layer_ed_profile(&mut state.network, &state.bases, split_of(&data, split), &data.preprocess, cfg, seed)?;
    for r in &rows {
        log::info!("block {}: ED_d {:.3}, ED_c {:.3} ± {:.3}", r.block, r.ed_d, r.ed_c_mean, r.ed_c_std);
    }
    fs::write(c.output_dir.join("ed_profile.csv"), ed_profile_csv(&rows))?;
    Ok(())
}

/// 0-based block indices from 1-based arguments; all blocks when empty.
fn block_list(blocks: &[usize], n_blocks: usize) -> Result<Vec<usize>, Failure> {
    if blocks.is_empty() {
        return Ok((0..n_blocks).collect());
    }
    blocks
        .iter()
        .map(|&b| {
            if (1..=n_blocks).contains(&b) {
                Ok(b - 1)
            } else {
                Err(config_err(format!("block {b} is outside 1..={n_blocks}")))
            }
        })
        .collect()
}

fn probe<T: Scalar>(c: &Common, ck: &Loaded, blocks: &[usize]) -> Outcome {
    let cfg = &ck.config;
    describe(c, "probe", cfg, ck.dtype)?;
    let data = DataContext::load(cfg).map_err(data_err)?;
    let mut state = ck.state::<T>()?;
    let blocks = block_list(blocks, state.network.n_blocks())?;
    train_probes(c, &mut state, &blocks, &data)?;
    Ok(())
}

/// Trains probes, merges them into the probe container and rewrites `probe.csv`.
fn train_probes<T: Scalar>(
    c: &Common,
    state: &mut TrainState<T>,
    blocks: &[usize],
    data: &DataContext,
) -> Result<Vec<(usize, Classifier<T>)>, Failure> {
    let cfg = state.config.clone();
    let results = linear_probes(&mut state.network, blocks, data, &cfg)?;
    let path = c.output_dir.join(PROBES);
    let mut container = Container::load(&path).unwrap_or_default();
    let summary_path = c.output_dir.join("probes.json");
    let mut summary: serde_json::Map<String, Value> = fs::read_to_string(&summary_path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    let mut history = metrics_csv(&[]);
    for r in &results {
        log::info!("probe on block {}: accuracy {:.4} (epoch {})", r.block, r.accuracy, r.best_epoch);
        for p in r.head.parameters() {
            container.push(p.name.clone(), StoredTensor::from_scalar(&p.value));
        }
        summary.insert(r.block.to_string(), json!({"accuracy": r.accuracy, "best_epoch": r.best_epoch}));
        for row in &r.history {
            history.push_str(&row.csv());
            history.push('\n');
        }
    }
    container.save(&path)?;
    write_json(&summary_path, &summary)?;
    fs::write(c.output_dir.join("probe_metrics.csv"), history)?;
    let mut rows: Vec<(usize, f64)> = summary
        .iter()
        .filter_map(|(k, v)| Some((k.parse().ok()?, v.get("accuracy")?.as_f64()?)))
        .collect();
    rows.sort_by_key(|r| r.0);
    fs::write(c.output_dir.join("probe.csv"), probe_csv(&rows))?;
    Ok(results.into_iter().map(|r| (r.block - 1, r.head)).collect())
}

fn stored_probe<T: Scalar>(state: &TrainState<T>, container: &Container, block: usize) -> Option<Classifier<T>> {
    let name = format!("probe{}", block + 1);
    let mut head = fresh_head(&state.config, &state.network, &name, block, state.config.score).ok()?;
    let w = container.get(&head.weight.name).ok()?.to_scalar::<T>().ok()?;
    let b = container.get(&head.bias.name).ok()?.to_scalar::<T>().ok()?;
    if w.shape() != head.weight.value.shape() || b.shape() != head.bias.value.shape() {
        return None;
    }
    head.weight.value = w;
    head.bias.value = b;
    Some(head)
}

fn analyze_info<T: Scalar>(c: &Common, ck: &Loaded, blocks: &[usize], mc_samples: usize, split: SplitArg) -> Outcome {
    if mc_samples < 2 {
        return Err(config_err("--mc-samples must be at least 2"));
    }
    let cfg = &ck.config;
    describe(c, "analyze-info", cfg, ck.dtype)?;
    let data = DataContext::load(cfg).map_err(data_err)?;
    let mut state = ck.state::<T>()?;
    let blocks = block_list(blocks, state.network.n_blocks())?;
    let stored = Container::load(&c.output_dir.join(PROBES)).unwrap_or_default();
    let mut heads: Vec<(usize, Classifier<T>)> = Vec::new();
    let mut missing = Vec::new();
    for &l in &blocks {
        match stored_probe(&state, &stored, l) {
            Some(h) => heads.push((l, h)),
            None => missing.push(l),
        }
    }
    if !missing.is_empty() {
        log::info!("training probes for blocks {:?}", missing.iter().map(|l| l + 1).collect::<Vec<_>>());
        heads.extend(train_probes(c, &mut state, &missing, &data)?);
    }
    heads.sort_by_key(|h| h.0);
    let dataset = split_of(&data, split);
    let mut rows = Vec::with_capacity(heads.len());
    for (l, head) in &heads {
        let seed = derive_seed(cfg.seeds.noise, &[TAG_INFO, *l as u64]);
        let info = readout_info(&mut state.network, head, *l, dataset, &data.preprocess, cfg, mc_samples, seed)?;
        log::info!(
            "block {}: I_tot {:.4}, I_lin {:.4}, I_cor {:.4} nats (± {:.4})",
            l + 1,
            info.i_tot,
            info.i_lin_absorbed,
            info.i_cor,
            info.se_tot
        );
        rows.push((l + 1, info));
    }
    fs::write(c.output_dir.join("info.csv"), info_csv(&rows))?;
    Ok(())
}

fn sweep_alpha<T: Scalar>(c: &Common, grid: &str, block: usize) -> Outcome {
    let cfg = fresh_config(c)?;
    let alphas = parse_grid(grid).map_err(config_err)?;
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(config_err(format!("alpha {a} is outside [0, 1]")));
    }
    if block == 0 {
        return Err(config_err("blocks are numbered from 1"));
    }
    describe(c, "sweep-alpha", &cfg, c.dtype)?;
    let data = DataContext::load(&cfg).map_err(data_err)?;
    let rows = alpha_sweep::<T>(&cfg, &data, &alphas, block - 1).map_err(|e| match e {
        Error::InvalidArgument(m) => config_err(m),
        e => e.into(),
    })?;
    fs::write(c.output_dir.join("sweep_alpha.csv"), sweep_csv(&rows))?;
    Ok(())
}

fn dump_noisy(c: &Common, p_grid: &str, count: usize, scale: u32) -> Outcome {
    let cfg = fresh_config(c)?;
    let ps = parse_grid(p_grid).map_err(config_err)?;
    if let Some(p) = ps.iter().find(|p| !(0.0..1.0).contains(*p)) {
        return Err(config_err(format!("dropout probability {p} is outside [0, 1)")));
    }
    if count == 0 || scale == 0 {
        return Err(config_err("--count and --scale must be positive"));
    }
    describe(c, "dump-noisy", &cfg, c.dtype)?;
    let data = DataContext::load(&cfg).map_err(data_err)?;
    let n = count.min(data.val.len());
    let idx: Vec<usize> = (0..n).collect();
    let (images, labels) = data.val.gather(&idx);
    let [ch, h, w] = data.val.image_shape();
    let item = ch * h * w;
    let mut cells = vec![Vec::with_capacity(ps.len()); n];
    for (j, &p) in ps.iter().enumerate() {
        let mut rng = stream(cfg.seeds.noise, &[TAG_NOISY, j as u64]);
        // undo the inverted-dropout gain so survivors keep their brightness
        let noisy = dropout_copies(&images, p, 1, &mut rng)?.map(|v| v * (1.0 - p) as f32);
        for (r, row) in cells.iter_mut().enumerate() {
            row.push(noisy.data()[r * item..(r + 1) * item].to_vec());
        }
    }
    let path = c.output_dir.join("noisy_grid.png");
    let saved = match tile(&cells, ch, h, w, scale) {
        Tiled::Gray(img) => img.save(&path),
        Tiled::Rgb(img) => img.save(&path),
    };
    saved.map_err(|e| Failure::from(Error::Io(std::io::Error::other(e.to_string()))))?;
    write_json(&c.output_dir.join("noisy_grid.json"), &json!({"p": ps, "val_indices": idx, "labels": labels}))
}
