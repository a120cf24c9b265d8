//! Training loop, `key=value` run configuration and run manifests.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::augment::{augment_image, AugmentSpec};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::{bce_loss, softmax_ce_loss, IGNORE_LABEL};
use crate::metrics::{evaluate_dataset, MetricReport, Task, ThresholdMode};
use crate::model::{default_widths, Gradients, SegNet, SegNetConfig};
use crate::optim::{AdamConfig, AdamState, OptimState, OptimizerKind, SgdConfig, SgdState};
use crate::tensor::Tensor;

/// Validation score used to pick the best epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectMetric {
    /// F-measure for saliency, mean IoU for multi-class.
    #[default]
    Auto,
    FBeta,
    MeanIou,
    /// IoU of class 1 in a saliency run.
    ForegroundIou,
}

impl SelectMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectMetric::Auto => "auto",
            SelectMetric::FBeta => "f_beta",
            SelectMetric::MeanIou => "mean_iou",
            SelectMetric::ForegroundIou => "foreground_iou",
        }
    }

    /// Replace `Auto` by the concrete metric for `task`.
    pub fn resolved(self, task: Task) -> SelectMetric {
        match (self, task) {
            (SelectMetric::Auto, Task::Saliency) => SelectMetric::FBeta,
            (SelectMetric::Auto, Task::Multiclass(_)) => SelectMetric::MeanIou,
            (m, _) => m,
        }
    }

    pub fn score(self, report: &MetricReport) -> f64 {
        match self.resolved(report.task) {
            SelectMetric::Auto => unreachable!("resolved above"),
            SelectMetric::FBeta => report.f_beta.unwrap_or(0.0),
            SelectMetric::MeanIou => report.mean_iou,
            SelectMetric::ForegroundIou => report.foreground_iou().unwrap_or(0.0),
        }
    }
}

impl fmt::Display for SelectMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(SelectMetric::Auto),
            "f_beta" => Ok(SelectMetric::FBeta),
            "mean_iou" => Ok(SelectMetric::MeanIou),
            "foreground_iou" => Ok(SelectMetric::ForegroundIou),
            _ => Err(Error::Config(format!("unknown selection metric {s:?}"))),
        }
    }
}

/// Everything that determines a training run.
///
/// `lr` and `weight_decay` default per optimizer when unset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub spec: AugmentSpec,
    pub depth: usize,
    /// Empty means the default widths for `depth`.
    pub widths: Vec<usize>,
    pub task: Task,
    pub optimizer: OptimizerKind,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub threshold: ThresholdMode,
    /// Stop after this many epochs without a training-loss improvement.
    pub patience: Option<usize>,
    /// Smallest loss decrease that counts as an improvement.
    pub min_delta: f64,
    /// Stop once the validation score reaches this value.
    pub stop_at: Option<f64>,
    pub select: SelectMetric,
    /// Zero-pad inputs to a multiple of `2^depth` instead of rejecting them.
    pub pad: bool,
    pub data: Option<PathBuf>,
    pub train_list: String,
    pub val_list: Option<String>,
    pub resize: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            spec: AugmentSpec::default(),
            depth: 2,
            widths: Vec::new(),
            task: Task::Saliency,
            optimizer: OptimizerKind::Adam,
            lr: None,
            weight_decay: None,
            momentum: SgdConfig::default().momentum,
            beta1: AdamConfig::default().beta1,
            beta2: AdamConfig::default().beta2,
            eps: AdamConfig::default().eps,
            batch: 2,
            epochs: 10,
            seed: 0,
            threshold: ThresholdMode::Adaptive,
            patience: None,
            min_delta: 0.0,
            stop_at: None,
            select: SelectMetric::Auto,
            pad: false,
            data: None,
            train_list: "train.txt".into(),
            val_list: None,
            resize: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_str<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

/// Parse `a,b,c` into widths.
pub fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| Error::InvalidWidths(format!("{s:?} is not a comma-separated list of integers")))
        })
        .collect()
}

/// Parse `HxW` into a size.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("size {s:?} is not of the form HxW")))?;
    Ok((parse("size", h)?, parse("size", w)?))
}

impl TrainConfig {
    pub fn resolved_widths(&self) -> Vec<usize> {
        if self.widths.is_empty() {
            default_widths(self.depth)
        } else {
            self.widths.clone()
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(match self.optimizer {
            OptimizerKind::Adam => AdamConfig::default().lr,
            OptimizerKind::Sgd => SgdConfig::default().lr,
        })
    }

    pub fn effective_weight_decay(&self) -> f64 {
        self.weight_decay.unwrap_or(match self.optimizer {
            OptimizerKind::Adam => AdamConfig::default().weight_decay,
            OptimizerKind::Sgd => SgdConfig::default().weight_decay,
        })
    }

    pub fn net_config(&self) -> SegNetConfig {
        SegNetConfig::new(self.depth, self.spec)
            .widths(self.resolved_widths())
            .out_channels(self.task.out_channels())
            .seed(self.seed)
    }

    pub fn new_optimizer(&self, net: &SegNet) -> OptimState {
        let params = net.param_tensors();
        match self.optimizer {
            OptimizerKind::Adam => OptimState::Adam(AdamState::new(
                AdamConfig {
                    lr: self.effective_lr(),
                    beta1: self.beta1,
                    beta2: self.beta2,
                    eps: self.eps,
                    weight_decay: self.effective_weight_decay(),
                },
                &params,
            )),
            OptimizerKind::Sgd => OptimState::Sgd(SgdState::new(
                SgdConfig {
                    lr: self.effective_lr(),
                    momentum: self.momentum,
                    weight_decay: self.effective_weight_decay(),
                },
                &params,
            )),
        }
    }

    /// Set one option by its command-line name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "variant" => self.spec.variant = value.parse()?,
            "norm" => self.spec.norm = value.parse()?,
            "depth" => self.depth = parse(key, value)?,
            "widths" => self.widths = if value == "default" { Vec::new() } else { parse_widths(value)? },
            "task" => self.task = value.parse()?,
            "optimizer" => self.optimizer = value.parse()?,
            "lr" => self.lr = parse_opt(key, value)?,
            "weight-decay" => self.weight_decay = parse_opt(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threshold" => self.threshold = value.parse()?,
            "patience" => self.patience = parse_opt(key, value)?,
            "min-delta" => self.min_delta = parse(key, value)?,
            "stop-at" => self.stop_at = parse_opt(key, value)?,
            "select" => self.select = value.parse()?,
            "pad" => self.pad = parse(key, value)?,
            "data" => self.data = (value != "none").then(|| PathBuf::from(value)),
            "train-list" => self.train_list = value.to_string(),
            "val-list" => self.val_list = (value != "none").then(|| value.to_string()),
            "resize" => self.resize = if value == "none" { None } else { Some(parse_size(value)?) },
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines. Blank lines, `#` comments and record keys
    /// (those containing a `.`, as written into manifests) are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let k = k.trim();
            if k.contains('.') {
                continue;
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every option as `key=value` lines, with optimizer defaults resolved.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.resolved_widths().iter().map(usize::to_string).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("variant", self.spec.variant.to_string());
        kv("norm", self.spec.norm.to_string());
        kv("depth", self.depth.to_string());
        kv("widths", widths.join(","));
        kv("task", self.task.to_string());
        kv("optimizer", self.optimizer.to_string());
        kv("lr", self.effective_lr().to_string());
        kv("weight-decay", self.effective_weight_decay().to_string());
        kv("momentum", self.momentum.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", self.eps.to_string());
        kv("batch", self.batch.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("threshold", self.threshold.to_string());
        kv("patience", opt_str(&self.patience));
        kv("min-delta", self.min_delta.to_string());
        kv("stop-at", opt_str(&self.stop_at));
        kv("select", self.select.to_string());
        kv("pad", self.pad.to_string());
        kv("data", opt_str(&self.data.as_ref().map(|p| p.display().to_string())));
        kv("train-list", self.train_list.clone());
        kv("val-list", opt_str(&self.val_list));
        kv("resize", opt_str(&self.resize.map(|(h, w)| format!("{h}x{w}"))));
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.net_config().validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.effective_lr() > 0.0 && self.effective_lr().is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Git-style content hash: SHA-256 of `blob <len>\0` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Zero-pad a sample at the bottom and right so both extents divide `factor`.
/// Multi-class padding is labelled as ignored; saliency padding as background.
pub fn pad_sample(s: &Sample, factor: usize, task: Task) -> Result<Sample> {
    let (h, w) = (s.height(), s.width());
    let (ph, pw) = (h.div_ceil(factor) * factor, w.div_ceil(factor) * factor);
    if (ph, pw) == (h, w) {
        return Ok(s.clone());
    }
    let fill = match task {
        Task::Saliency => 0.0,
        Task::Multiclass(_) => IGNORE_LABEL as f64,
    };
    let image = Tensor::from_fn4([1, 3, ph, pw], |_, c, y, x| {
        if y < h && x < w {
            s.image.data()[(c * h + y) * w + x]
        } else {
            0.0
        }
    })?
    .reshape(vec![3, ph, pw])?;
    let mask = Tensor::from_fn4([1, 1, ph, pw], |_, _, y, x| {
        if y < h && x < w {
            s.mask.data()[y * w + x]
        } else {
            fill
        }
    })?
    .reshape(vec![ph, pw])?;
    Sample::new(image, mask, s.id.clone())
}

fn check_divisible(samples: &[Sample], factor: usize) -> Result<()> {
    for s in samples {
        for (axis, extent) in [("H", s.height()), ("W", s.width())] {
            if extent % factor != 0 {
                return Err(Error::Divisibility { axis, extent, factor });
            }
        }
    }
    Ok(())
}

fn prepare(cfg: &TrainConfig, samples: &[Sample]) -> Result<Vec<Sample>> {
    let factor = 1usize << cfg.depth;
    if cfg.pad {
        samples.iter().map(|s| pad_sample(s, factor, cfg.task)).collect()
    } else {
        check_divisible(samples, factor)?;
        Ok(samples.to_vec())
    }
}

// keeps the shuffle stream apart from weight initialization
const ORDER_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Order in which `epoch` visits `n` samples.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ORDER_SALT);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}


/// Loss and parameter gradient for one sample.
pub fn sample_loss_and_grad(net: &SegNet, s: &Sample, task: Task) -> Result<(f64, Gradients)> {
    let x = augment_image(&Tensor::stack(&[&s.image])?, net.spec())?;
    let (pred, cache) = net.forward_with_cache(&x)?;
    let (loss, d_pred) = match task {
        Task::Saliency => bce_loss(&pred, &s.mask)?,
        Task::Multiclass(_) => softmax_ce_loss(&pred, &s.mask)?,
    };
    Ok((loss, net.backward(&cache, &d_pred)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<MetricReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EpochBudget,
    Plateau,
    TargetReached,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::EpochBudget => "epoch_budget",
            StopReason::Plateau => "plateau",
            StopReason::TargetReached => "target_reached",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: SegNet,
    pub optim: OptimState,
    pub history: Vec<EpochRecord>,
    /// Epoch with the highest validation score, with that epoch's weights.
    pub best: Option<(usize, SegNet)>,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&MetricReport> {
        self.history.last().and_then(|r| r.val.as_ref())
    }

    pub fn best_metrics(&self) -> Option<&MetricReport> {
        let (epoch, _) = self.best.as_ref()?;
        self.history[epoch - 1].val.as_ref()
    }
}

/// Train a fresh network. `on_epoch` sees every finished epoch, e.g. to write
/// checkpoints or report progress.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: Option<&[Sample]>,
    mut on_epoch: impl FnMut(&EpochRecord, &SegNet, &OptimState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_some_and(<[Sample]>::is_empty) {
        return Err(Error::EmptyDataset);
    }
    let train_set = prepare(cfg, train_set)?;
    let val_set = val_set.map(|v| prepare(cfg, v)).transpose()?;
    for s in train_set.iter().chain(val_set.iter().flatten()) {
        s.validate_mask(cfg.task)?;
    }

    let mut net = SegNet::build(cfg.net_config())?;
    let mut optim = cfg.new_optimizer(&net);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, SegNet)> = None;
    let mut best_loss = f64::INFINITY;
    let mut since_improved = 0;
    let mut step = 0;
    let mut stop = StopReason::EpochBudget;

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            step += 1;
            let mut batch_loss = 0.0;
            let mut grads: Option<Gradients> = None;
            for &i in chunk {
                let (l, g) = sample_loss_and_grad(&net, &train_set[i], cfg.task)?;
                batch_loss += l;
                match grads.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads = Some(g),
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    epoch,
                    value: batch_loss,
                });
            }
            let mut grads = grads.expect("chunks are non-empty");
            grads.scale(scale);
            optim.step(&mut net.param_tensors_mut(), grads.tensors())?;
            loss_sum += batch_loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val = match &val_set {
            Some(v) => Some(evaluate_dataset(&net, v, cfg.task, cfg.threshold)?),
            None => None,
        };
        let record = EpochRecord { epoch, train_loss, val };
        on_epoch(&record, &net, &optim)?;

        let mut reached = false;
        if let Some(report) = &record.val {
            let score = cfg.select.score(report);
            if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
                best = Some((epoch, score, net.clone()));
            }
            reached = cfg.stop_at.is_some_and(|t| score >= t);
        }
        if train_loss < best_loss - cfg.min_delta {
            best_loss = train_loss;
            since_improved = 0;
        } else {
            since_improved += 1;
        }
        history.push(record);
        if reached {
            stop = StopReason::TargetReached;
            break;
        }
        if cfg.patience.is_some_and(|p| since_improved >= p) {
            stop = StopReason::Plateau;
            break;
        }
    }
    Ok(TrainOutcome {
        net,
        optim,
        history,
        best: best.map(|(e, _, n)| (e, n)),
        stop,
    })
}

/// Configuration plus results of one run.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub model_hash: String,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
}

fn write_report(s: &mut String, prefix: &str, r: &MetricReport) {
    for line in r.to_kv().lines() {
        let _ = writeln!(s, "{prefix}.{line}");
    }
}

impl RunManifest {
    pub fn new(config: &TrainConfig, outcome: &TrainOutcome, model_bytes: &[u8]) -> Self {
        RunManifest {
            config: config.clone(),
            model_hash: content_hash(model_bytes),
            history: outcome.history.clone(),
            best_epoch: outcome.best.as_ref().map(|(e, _)| *e),
            stop: outcome.stop,
        }
    }

    /// Config lines followed by dotted result records. Feeding the text back
    /// to [`TrainConfig::from_text`] recovers the configuration.
    pub fn to_text(&self) -> String {
        let mut s = self.config.to_text();
        let _ = writeln!(s, "run.model_hash={}", self.model_hash);
        let _ = writeln!(s, "run.epochs_completed={}", self.history.len());
        let _ = writeln!(s, "run.stop={}", self.stop.as_str());
        if let Some(e) = self.best_epoch {
            let _ = writeln!(s, "run.best_epoch={e}");
        }
        for r in &self.history {
            let _ = writeln!(s, "epoch.{}.train_loss={}", r.epoch, r.train_loss);
            if let Some(v) = &r.val {
                let _ = writeln!(s, "epoch.{}.score={}", r.epoch, self.config.select.score(v));
            }
        }
        if let Some(v) = self.best_epoch.and_then(|e| self.history[e - 1].val.as_ref()) {
            write_report(&mut s, "best", v);
        }
        if let Some(v) = self.history.last().and_then(|r| r.val.as_ref()) {
            write_report(&mut s, "final", v);
        }
        s
    }
}
