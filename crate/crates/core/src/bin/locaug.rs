use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use locaug::bench::{bench_variants, BenchConfig};
use locaug::data::{
    gen_circle_dataset, gen_location_bias_dataset, load_dataset_dir, load_image, write_dataset_dir, CircleTaskConfig,
    ColorMode, LocationBiasConfig,
};
use locaug::gradcheck::{run_gradchecks, stock_cases};
use locaug::metrics::evaluate_dataset;
use locaug::train::{content_hash, parse_size, train, RunManifest, TrainConfig};
use locaug::{augment_image, location_channels, write_tensor, AugmentSpec, Error, Result, SegNet, Task, ThresholdMode, Variant};

#[derive(Parser)]
#[command(name = "locaug", version, about = "Location-augmented segmentation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write the model, optimizer state and manifest.
    Train(TrainCmd),
    /// Score a saved model on a dataset.
    Eval(EvalCmd),
    /// Compare augmentation variants over several seeds.
    Bench(BenchCmd),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckCmd),
    /// Write location channels, or an image's full augmented input, as LAUG.
    Augment(AugmentCmd),
    /// Generate a synthetic dataset directory.
    GenData(GenDataCmd),
}

/// Options shared by `train` and `bench`; each overrides the config file.
#[derive(Args, Default)]
struct RunOpts {
    /// `key=value` file, e.g. a previous run's manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long = "weight-decay")]
    weight_decay: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    task: Option<String>,
    /// Stop after this many epochs without a training-loss improvement.
    #[arg(long)]
    patience: Option<String>,
    #[arg(long = "min-delta")]
    min_delta: Option<String>,
    /// Stop once the validation score reaches this value.
    #[arg(long = "stop-at")]
    stop_at: Option<String>,
    /// Validation score for best-epoch selection: auto, f_beta, mean_iou, foreground_iou.
    #[arg(long)]
    select: Option<String>,
    /// Zero-pad inputs to a multiple of 2^depth instead of rejecting them.
    #[arg(long)]
    pad: Option<String>,
    /// Dataset directory with images/, masks/ and id lists.
    #[arg(long)]
    data: Option<String>,
    #[arg(long = "train-list")]
    train_list: Option<String>,
    #[arg(long = "val-list")]
    val_list: Option<String>,
    /// Resize every sample to HxW on load.
    #[arg(long)]
    resize: Option<String>,
}

impl RunOpts {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            cfg.apply_text(&text)?;
        }
        let flags = [
            ("variant", &self.variant),
            ("depth", &self.depth),
            ("widths", &self.widths),
            ("norm", &self.norm),
            ("lr", &self.lr),
            ("batch", &self.batch),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("optimizer", &self.optimizer),
            ("momentum", &self.momentum),
            ("weight-decay", &self.weight_decay),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("eps", &self.eps),
            ("threshold", &self.threshold),
            ("task", &self.task),
            ("patience", &self.patience),
            ("min-delta", &self.min_delta),
            ("stop-at", &self.stop_at),
            ("select", &self.select),
            ("pad", &self.pad),
            ("data", &self.data),
            ("train-list", &self.train_list),
            ("val-list", &self.val_list),
            ("resize", &self.resize),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    run: RunOpts,
    #[arg(long, default_value = "locaug-out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val.txt")]
    list: String,
    #[arg(long, default_value = "saliency")]
    task: Task,
    #[arg(long, default_value = "adaptive")]
    threshold: ThresholdMode,
    #[arg(long)]
    resize: Option<String>,
    /// Print `key=value` lines instead of a table.
    #[arg(long)]
    kv: bool,
    #[arg(long, default_value = "locaug-out")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchCmd {
    #[command(flatten)]
    run: RunOpts,
    #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[arg(long, default_value_t = 20)]
    timing_trials: usize,
    #[arg(long, default_value = "locaug-out")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckCmd {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "locaug-out")]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentCmd {
    #[arg(long, required_unless_present = "input")]
    height: Option<usize>,
    #[arg(long, required_unless_present = "input")]
    width: Option<usize>,
    /// Binary PPM image; its RGB channels are written ahead of the location channels.
    #[arg(long, conflicts_with_all = ["height", "width"])]
    input: Option<PathBuf>,
    #[arg(long, default_value = "rgb+coord")]
    variant: Variant,
    #[arg(long, default_value = "unit")]
    norm: locaug::Normalization,
    /// Output tensor file.
    #[arg(long, visible_alias = "output")]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataCmd {
    /// `circle` or `squares`.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long = "val-count", default_value_t = 50)]
    val_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Circle radius.
    #[arg(long, default_value_t = 14)]
    radius: usize,
    /// Circle colouring: `uniform` or `noise`.
    #[arg(long, default_value = "uniform")]
    color: ColorMode,
    /// Number of squares per image.
    #[arg(long, default_value_t = 3)]
    squares: usize,
    /// Square side length.
    #[arg(long, default_value_t = 8)]
    side: usize,
    #[arg(long)]
    out: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_splits(cfg: &TrainConfig) -> Result<(Vec<locaug::data::Sample>, Option<Vec<locaug::data::Sample>>)> {
    let root = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset given (use --data)".into()))?;
    let train_set = load_dataset_dir(root, &cfg.train_list, cfg.task, cfg.resize)?;
    let val_set = match &cfg.val_list {
        Some(list) => Some(load_dataset_dir(root, list, cfg.task, cfg.resize)?),
        None => None,
    };
    Ok((train_set, val_set))
}

fn run_train(cmd: TrainCmd) -> Result<()> {
    let cfg = cmd.run.resolve()?;
    let (train_set, val_set) = load_splits(&cfg)?;
    create_dir(&cmd.out)?;
    let out = &cmd.out;
    let outcome = train(&cfg, &train_set, val_set.as_deref(), |rec, net, optim| {
        write_file(&out.join("checkpoint.lnet"), net.save())?;
        write_file(&out.join("checkpoint.lopt"), optim.to_bytes())?;
        let score = rec
            .val
            .as_ref()
            .map(|v| format!(" score={:.4}", cfg.select.score(v)))
            .unwrap_or_default();
        eprintln!("epoch={} train_loss={:.6}{score}", rec.epoch, rec.train_loss);
        Ok(())
    })?;
    let model = outcome.net.save();
    write_file(&out.join("model.lnet"), &model)?;
    write_file(&out.join("optim.lopt"), outcome.optim.to_bytes())?;
    if let Some((_, best)) = &outcome.best {
        write_file(&out.join("best.lnet"), best.save())?;
    }
    let manifest = RunManifest::new(&cfg, &outcome, &model);
    write_file(&out.join("manifest.txt"), manifest.to_text())?;
    println!("model_hash={}", manifest.model_hash);
    if let (Some(e), Some(m)) = (manifest.best_epoch, outcome.best_metrics()) {
        println!("best_epoch={e} best_score={:.4}", cfg.select.score(m));
    }
    if let Some(m) = outcome.final_metrics() {
        println!("final_score={:.4}", cfg.select.score(m));
    }
    Ok(())
}

fn run_eval(cmd: EvalCmd) -> Result<()> {
    let bytes = fs::read(&cmd.model).map_err(|e| Error::Io {
        path: cmd.model.clone(),
        source: e,
    })?;
    let net = SegNet::load(&bytes)?;
    let resize = cmd.resize.as_deref().map(parse_size).transpose()?;
    let samples = load_dataset_dir(&cmd.data, &cmd.list, cmd.task, resize)?;
    let report = evaluate_dataset(&net, &samples, cmd.task, cmd.threshold)?;
    if cmd.kv {
        print!("{}", report.to_kv());
    } else {
        print!("{}", report.to_table());
    }
    create_dir(&cmd.out)?;
    let mut m = String::new();
    let _ = writeln!(m, "command=eval");
    let _ = writeln!(m, "model={}", cmd.model.display());
    let _ = writeln!(m, "model_hash={}", content_hash(&bytes));
    let _ = writeln!(m, "data={}", cmd.data.display());
    let _ = writeln!(m, "list={}", cmd.list);
    for line in report.to_kv().lines() {
        let _ = writeln!(m, "result.{line}");
    }
    write_file(&cmd.out.join("eval_manifest.txt"), m)
}

fn run_bench(cmd: BenchCmd) -> Result<()> {
    let base = cmd.run.resolve()?;
    let (train_set, val_set) = load_splits(&base)?;
    let val_set = val_set.ok_or_else(|| Error::Config("bench needs a validation list (use --val-list)".into()))?;
    let mut cfg = BenchConfig::new(base, cmd.seeds);
    if let Some(v) = cmd.variants {
        cfg.variants = v;
    }
    cfg.timing_trials = cmd.timing_trials;
    let table = bench_variants(&cfg, &train_set, &val_set)?;
    let text = table.to_text();
    print!("{text}");
    create_dir(&cmd.out)?;
    let mut m = cfg.base.to_text();
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(m, "bench.seeds={}", seeds.join(","));
    for row in &table.rows {
        let v = row.variant.as_str();
        let _ = writeln!(m, "bench.{v}.params={}", row.param_count);
        let _ = writeln!(m, "bench.{v}.best={:?}", row.best);
        let _ = writeln!(m, "bench.{v}.final={:?}", row.last);
        let _ = writeln!(m, "bench.{v}.seconds_per_image={}", row.seconds_per_image);
    }
    write_file(&cmd.out.join("bench.txt"), text)?;
    write_file(&cmd.out.join("bench_manifest.txt"), m)
}

fn run_gradcheck(cmd: GradcheckCmd) -> Result<bool> {
    let report = run_gradchecks(&stock_cases(), cmd.instances, cmd.seed)?;
    let text = report.to_text();
    print!("{text}");
    create_dir(&cmd.out)?;
    let mut m = format!("command=gradcheck\ninstances={}\nseed={}\n", cmd.instances, cmd.seed);
    for e in &report.entries {
        let _ = writeln!(m, "result.{}.max_rel_err={:e}", e.name, e.max_rel_err);
        let _ = writeln!(m, "result.{}.passed={}", e.name, e.passed());
    }
    write_file(&cmd.out.join("gradcheck_manifest.txt"), m)?;
    if !report.all_passed() {
        eprintln!(
            "error kind=gradcheck_failed cases={}",
            report.failures().join(",")
        );
    }
    Ok(report.all_passed())
}

fn run_augment(cmd: AugmentCmd) -> Result<()> {
    let spec = AugmentSpec::new(cmd.variant, cmd.norm);
    let x = match (&cmd.input, cmd.height, cmd.width) {
        (Some(path), _, _) => {
            let img = load_image(path)?;
            let (h, w) = (img.shape()[1], img.shape()[2]);
            augment_image(&img.reshape(vec![1, 3, h, w])?, spec)?
        }
        (None, Some(h), Some(w)) => location_channels(h, w, spec)?
            .ok_or_else(|| Error::Config(format!("variant {} has no location channels", cmd.variant)))?,
        _ => return Err(Error::Config("augment needs --input or both --height and --width".into())),
    };
    write_file(&cmd.out, write_tensor(&x))?;
    println!("shape={:?}", x.shape());
    Ok(())
}

fn run_gen_data(cmd: GenDataCmd) -> Result<()> {
    let (h, w) = parse_size(&cmd.size)?;
    let (train_set, val_set) = match cmd.kind.as_str() {
        "circle" => {
            let mut cfg = CircleTaskConfig::centered(h, w, cmd.radius, cmd.count, cmd.seed);
            cfg.color_mode = cmd.color;
            let train_set = gen_circle_dataset(&cfg)?;
            cfg.count = cmd.val_count;
            cfg.seed = cmd.seed.wrapping_add(1);
            (train_set, gen_circle_dataset(&cfg)?)
        }
        "squares" => {
            let mut cfg = LocationBiasConfig::new(h, w, cmd.squares, cmd.side, cmd.count, cmd.seed);
            let train_set = gen_location_bias_dataset(&cfg)?;
            cfg.count = cmd.val_count;
            cfg.seed = cmd.seed.wrapping_add(1);
            (train_set, gen_location_bias_dataset(&cfg)?)
        }
        other => return Err(Error::DatasetConfig(format!("unknown dataset kind {other:?}"))),
    };
    // validation ids must not collide with training ids
    let val_set: Vec<_> = val_set
        .into_iter()
        .map(|mut s| {
            s.id = format!("val_{}", s.id);
            s
        })
        .collect();
    write_dataset_dir(&cmd.out, "train.txt", &train_set, Task::Saliency)?;
    write_dataset_dir(&cmd.out, "val.txt", &val_set, Task::Saliency)?;
    let m = format!(
        "command=gen-data\nkind={}\nsize={h}x{w}\ncount={}\nval-count={}\nseed={}\nradius={}\nsquares={}\nside={}\n",
        cmd.kind, cmd.count, cmd.val_count, cmd.seed, cmd.radius, cmd.squares, cmd.side
    );
    write_file(&cmd.out.join("manifest.txt"), m)?;
    println!("train={} val={}", train_set.len(), val_set.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => run_train(c).map(|()| true),
        Command::Eval(c) => run_eval(c).map(|()| true),
        Command::Bench(c) => run_bench(c).map(|()| true),
        Command::Gradcheck(c) => run_gradcheck(c),
        Command::Augment(c) => run_augment(c).map(|()| true),
        Command::GenData(c) => run_gen_data(c).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
