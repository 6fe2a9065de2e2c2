//! `ufo`: property verification, training, evaluation, model audits, scaling
//! benchmarks and attention-map export.
//!
//! Exit codes: 0 success, 1 property failure, 2 training divergence, 3 usage
//! error, 4 I/O or format error.

mod config;
mod pnm;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use ufo_core::attention::{attention_map_approx, NormKind};
use ufo_core::bench::{
    emit_csv, fit_records, max_batch_probe, run_scaling_sweep_with, BenchRecord, Mechanism, Metric, SweepDims,
    SweepOptions,
};
use ufo_core::model::{count_flops_at, table_gflops, ModelConfig, UfoViT};
use ufo_core::train::data::{CIFAR_MEAN, CIFAR_STD, MNIST_MEAN, MNIST_STD};
use ufo_core::train::{
    evaluate, load_backbone, load_cifar10_bin, load_into, load_mnist, save_checkpoint, train, write_history_csv,
    Dataset, Split, TrainConfig,
};
use ufo_core::{verify, Error, Tensor};

/// Root directory holding `mnist/` and `cifar10/`.
const DATA_ENV: &str = "UFO_DATA_DIR";

#[derive(Parser)]
#[command(name = "ufo", version, about = "Linear-complexity XNorm attention: verify, train, evaluate, audit, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the gradient, oracle, invariance and scaling property suites
    Verify(VerifyArgs),
    /// Train a model and write history.csv, model.ckpt and config.ini
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint
    Eval(EvalArgs),
    /// Depth, widths, parameter count and GFLOPs of a model
    Info(InfoArgs),
    /// Flop, peak-memory and wall-time scaling of the attention kernels
    Bench(BenchArgs),
    /// Per-patch class-attention weights as CSV and PGM
    Attnmap(AttnmapArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Fault {
    /// Add 1e-3 to every L2 normalization epsilon
    XnormEps,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only properties whose name contains this text (e.g. grad, attention, scaling)
    #[arg(long)]
    filter: Option<String>,
    /// Inject a fault to confirm the suites catch it
    #[arg(long = "break", value_name = "FAULT")]
    fault: Option<Fault>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetKind,
    /// Directory with the dataset files [default: $UFO_DATA_DIR/<dataset>, or data/<dataset>]
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Preset: tiny, T, S, M or B
    #[arg(long, default_value = "tiny")]
    model: String,
    /// Attention normalization: xnorm, layer_norm, group_norm, instance_norm, learnable_p,
    /// single_l2_q_only, single_l2_kv_only
    #[arg(long, default_value = "xnorm")]
    ablation: NormKind,
}

#[derive(Args)]
struct TrainArgs {
    /// File of `key = value` settings; flags given on the command line take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Peak learning rate at batch 512, scaled linearly to the batch size
    #[arg(long, default_value_t = 5e-4)]
    base_lr: f64,
    #[arg(long, default_value_t = 1.0)]
    warmup_epochs: f64,
    #[arg(long, default_value_t = 1e-5)]
    min_lr: f64,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
    /// Stochastic-depth rate of the last block
    #[arg(long, default_value_t = 0.05)]
    droppath: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Update only the classifier head
    #[arg(long)]
    freeze_backbone: bool,
    /// Checkpoint to start from; with --freeze-backbone a differently shaped head is re-initialized
    #[arg(long)]
    init: Option<PathBuf>,
    /// Random 4-pixel-padded crops
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    augment: bool,
    /// Random horizontal flips
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    flip: bool,
    /// Use only the first N training samples
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N test samples
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Use only the first N samples
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct InfoArgs {
    /// Preset name (tiny, T, S, M, B, UFO-ViT-S, ...) or a model config file
    model: String,
    /// Count GFLOPs at this input resolution instead of the configured one
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "ufo,softmax")]
    mechanisms: Vec<Mechanism>,
    /// Token counts: `lo..hi` for the powers of two in range, or a comma list
    #[arg(long, default_value = "64..4096")]
    n: String,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Wall time is the median of this many runs
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Points needing more bytes than this are recorded as truncated
    #[arg(long)]
    budget_bytes: Option<u64>,
    /// Measure points concurrently
    #[arg(long)]
    parallel_points: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also report the largest batch per mechanism fitting this many bytes
    #[arg(long)]
    max_batch_budget: Option<u64>,
    /// Token count for the max-batch probe
    #[arg(long, default_value_t = 1024)]
    max_batch_n: usize,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct AttnmapArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset whose normalization and channel count the model uses
    #[command(flatten)]
    data: DataArgs,
    /// Binary PGM (P5) or PPM (P6) input image
    #[arg(long, conflicts_with = "index")]
    image: Option<PathBuf>,
    /// Test-split sample of --dataset to use instead of --image
    #[arg(long)]
    index: Option<usize>,
    /// Class-attention block [default: the last]
    #[arg(long)]
    block: Option<usize>,
    /// Ridge regularization of the least-squares recovery
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    /// Weights below this fraction of the largest are zeroed before scaling
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    /// Output prefix; writes <prefix>.csv and <prefix>.pgm
    #[arg(long, default_value = "attnmap")]
    out: PathBuf,
}

enum Failure {
    Property(String),
    Core(Error),
    Usage(String),
    Clap(clap::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Property(_) => 1,
            Failure::Core(Error::Divergence { .. }) => 2,
            Failure::Core(Error::Numeric(_)) => 1,
            Failure::Core(Error::Usage(_) | Error::Dimension(_)) | Failure::Usage(_) | Failure::Clap(_) => 3,
            Failure::Core(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Property(m) | Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Clap(e) => write!(f, "{e}"),
        }
    }
}

type Outcome = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(Error::Io { path: path.to_path_buf(), source: e })
}

/// Parses `argv`, merging a `--config` file under the explicit flags.
/// Returns the parsed command and its resolved settings.
fn parse_args(argv: Vec<OsString>) -> Result<(Cli, String), Failure> {
    let cmd = Cli::command();
    let first = cmd.clone().try_get_matches_from(&argv).map_err(Failure::Clap)?;
    let (name, sub) = first.subcommand().expect("a subcommand is required");
    let sub_cmd = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let mut matches = first.clone();
    let config_path = sub_cmd.get_arguments().any(|a| a.get_id() == "config").then(|| sub.get_one::<PathBuf>("config")).flatten();
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let entries = config::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let extra = config::file_args(sub_cmd, sub, &entries).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let pos = argv.iter().skip(1).position(|a| a == name).expect("subcommand in argv") + 1;
        let mut merged = argv[..=pos].to_vec();
        merged.extend(extra);
        merged.extend_from_slice(&argv[pos + 1..]);
        matches = cmd.clone().try_get_matches_from(merged).map_err(Failure::Clap)?;
    }
    let resolved = config::render(sub_cmd, matches.subcommand().expect("subcommand").1);
    let cli = Cli::from_arg_matches(&matches).map_err(Failure::Clap)?;
    Ok((cli, resolved))
}

fn log_config(name: &str, resolved: &str) {
    eprintln!("# {name} configuration");
    for line in resolved.lines() {
        eprintln!("#   {line}");
    }
}

fn data_dir(args: &DataArgs) -> PathBuf {
    if let Some(d) = &args.data_dir {
        return d.clone();
    }
    let root = std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"));
    root.join(args.dataset.dir_name())
}

fn load(args: &DataArgs, split: Split) -> Result<Dataset, Failure> {
    let dir = data_dir(args);
    Ok(match args.dataset {
        DatasetKind::Mnist => load_mnist(&dir, split)?,
        DatasetKind::Cifar10 => load_cifar10_bin(&dir, split)?,
    })
}

/// Preset adapted to the dataset's channels, resolution and classes.
fn model_config(model: &ModelArgs, dataset: DatasetKind) -> Result<ModelConfig, Failure> {
    let mut c = ModelConfig::preset(&model.model)?;
    match dataset {
        DatasetKind::Mnist => {
            c.in_chans = 1;
            c.input_resolution = 28;
        }
        DatasetKind::Cifar10 => {
            c.in_chans = 3;
            c.input_resolution = 32;
        }
    }
    c.num_classes = 10;
    c.norm_kind = model.ablation;
    c.validate()?;
    Ok(c)
}

fn cmd_verify(a: &VerifyArgs) -> Outcome {
    if a.fault == Some(Fault::XnormEps) {
        ufo_core::faults::set_xnorm_eps_broken(true);
        println!("fault injected: xnorm-eps");
    }
    println!("{:<6} {:<40} {:>8}  detail", "result", "property", "seconds");
    let outcomes = verify::run(a.filter.as_deref(), |o| {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("{tag:<6} {:<40} {:>8.2}  {}", o.name, o.seconds, o.detail);
    });
    if outcomes.is_empty() {
        return Err(Failure::Usage(format!("no property matches filter {:?}", a.filter.as_deref().unwrap_or(""))));
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    match outcomes.iter().find(|o| !o.passed) {
        Some(o) => Err(Failure::Property(format!("property {} failed: {}", o.name, o.detail))),
        None => Ok(()),
    }
}

fn cmd_train(a: &TrainArgs, resolved: &str) -> Outcome {
    log_config("train", resolved);
    let mut train_set = load(&a.data, Split::Train)?;
    let mut test_set = load(&a.data, Split::Test)?;
    if let Some(n) = a.train_limit {
        train_set = train_set.take(n);
    }
    if let Some(n) = a.test_limit {
        test_set = test_set.take(n);
    }
    let cfg = TrainConfig {
        base_lr: a.base_lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        warmup_epochs: a.warmup_epochs,
        weight_decay: a.weight_decay,
        label_smoothing: a.label_smoothing,
        droppath_rate: a.droppath,
        seed: a.seed,
        ablation_kind: a.model.ablation,
        freeze_backbone: a.freeze_backbone,
        min_lr: a.min_lr,
        augment: a.augment,
        flip: a.flip,
    };
    cfg.validate()?;
    let mc = cfg.apply_to(&model_config(&a.model, a.data.dataset)?);
    let mut model = UfoViT::<f32>::build(&mc, a.seed)?;
    if let Some(init) = &a.init {
        if a.freeze_backbone {
            load_backbone(&mut model, init)?;
        } else {
            load_into(&mut model, init)?;
        }
    }
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let cfg_path = a.out.join("config.ini");
    std::fs::write(&cfg_path, resolved).map_err(|e| io_err(&cfg_path, e))?;
    eprintln!("model: {mc}, {} parameters", model.count_params());
    eprintln!("data: {} train, {} test samples", train_set.len(), test_set.len());
    let report = train(&mut model, &train_set, &test_set, &cfg, |r| {
        println!(
            "epoch {:>3}  step {:>6}  lr {:.3e}  train_loss {:.4}  test_acc {:.4}",
            r.epoch, r.step, r.lr, r.train_loss, r.test_acc
        );
    })?;
    write_history_csv(&report.history, &a.out.join("history.csv"))?;
    save_checkpoint(&model, &a.out.join("model.ckpt"))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, resolved: &str) -> Outcome {
    log_config("eval", resolved);
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let mut data = load(&a.data, split)?;
    if let Some(n) = a.limit {
        data = data.take(n);
    }
    let mc = model_config(&a.model, a.data.dataset)?;
    let mut model = UfoViT::<f32>::build(&mc, 0)?;
    load_into(&mut model, &a.checkpoint).map_err(|e| match e {
        Error::ShapeMismatch { .. } | Error::MissingTensor(_) => Failure::Core(Error::Format {
            path: a.checkpoint.clone(),
            offset: 0,
            msg: format!("checkpoint does not fit model `{}`: {e}", a.model.model),
        }),
        e => Failure::Core(e),
    })?;
    let acc = evaluate(&model, &data)?;
    println!("top-1 accuracy {acc:.4} on {} samples", data.len());
    Ok(())
}

const MODEL_KEYS: [&str; 13] = [
    "depth",
    "dim",
    "embed",
    "heads",
    "patch_size",
    "input_resolution",
    "num_classes",
    "in_chans",
    "class_attn_depth",
    "ffn_ratio",
    "droppath_rate",
    "norm_kind",
    "xnorm_eps",
];

/// Model config file: the keys of [`MODEL_KEYS`] over the Tiny defaults, or
/// over a preset named by a `preset` key.
fn model_from_file(path: &Path) -> Result<ModelConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bad = |m: String| Failure::Usage(format!("{}: {m}", path.display()));
    let entries = config::parse(&text).map_err(bad)?;
    let mut c = match entries.iter().find(|e| e.key == "preset") {
        Some(e) => ModelConfig::preset(&e.value)?,
        None => ModelConfig::tiny(),
    };
    for e in entries.iter().filter(|e| e.key != "preset") {
        let v = e.value.as_str();
        let uint = || v.parse::<usize>().map_err(|_| bad(format!("line {}: `{}` needs an integer", e.line, e.key)));
        let float = || v.parse::<f64>().map_err(|_| bad(format!("line {}: `{}` needs a number", e.line, e.key)));
        match e.key.as_str() {
            "depth" => c.depth = uint()?,
            "dim" => c.dim = uint()?,
            "embed" => c.embed = uint()?,
            "heads" => c.heads = uint()?,
            "patch_size" => c.patch_size = uint()?,
            "input_resolution" => c.input_resolution = uint()?,
            "num_classes" => c.num_classes = uint()?,
            "in_chans" => c.in_chans = uint()?,
            "class_attn_depth" => c.class_attn_depth = uint()?,
            "ffn_ratio" => c.ffn_ratio = uint()?,
            "droppath_rate" => c.droppath_rate = float()?,
            "norm_kind" => c.norm_kind = v.parse()?,
            "xnorm_eps" => c.xnorm_eps = float()?,
            k => {
                return Err(bad(format!(
                    "line {}: unknown key `{k}`; valid keys: preset, {}",
                    e.line,
                    MODEL_KEYS.join(", ")
                )))
            }
        }
    }
    c.validate()?;
    Ok(c)
}

fn cmd_info(a: &InfoArgs) -> Outcome {
    let path = Path::new(&a.model);
    let config = if path.is_file() { model_from_file(path)? } else { ModelConfig::preset(&a.model)? };
    let res = a.resolution.unwrap_or(config.input_resolution);
    let model = UfoViT::<f32>::build(&config, 0)?;
    let flops = count_flops_at(&config, res)?;
    println!("{:<12} {:>5} {:>5} {:>6} {:>6} {:>6} {:>12} {:>10} {:>8}", "model", "depth", "dim", "embed", "heads", "res", "params", "params(M)", "GFLOPs");
    println!(
        "{:<12} {:>5} {:>5} {:>6} {:>6} {:>6} {:>12} {:>10.2} {:>8.3}",
        a.model,
        config.depth,
        config.dim,
        config.embed,
        config.heads,
        res,
        model.count_params(),
        model.count_params() as f64 / 1e6,
        table_gflops(flops.total)
    );
    println!("attention share of flops: {:.1}%", 100.0 * flops.attention as f64 / flops.total as f64);
    Ok(())
}

/// `lo..hi` expands to the powers of two in range; otherwise a comma list.
fn parse_tokens(spec: &str) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::Usage(format!("cannot parse token counts `{spec}`; use `64..4096` or `64,128,256,512`"));
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if lo == 0 || lo > hi {
            return Err(bad());
        }
        let mut out = Vec::new();
        let mut n = lo.next_power_of_two();
        while n <= hi {
            out.push(n);
            n *= 2;
        }
        return Ok(out);
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn cmd_bench(a: &BenchArgs, resolved: &str) -> Outcome {
    log_config("bench", resolved);
    let n_list = parse_tokens(&a.n)?;
    let dims = SweepDims { d_model: a.d_model, heads: a.heads, head_dim: a.head_dim, batch: a.batch };
    let opts = SweepOptions { repeats: a.repeats, budget_bytes: a.budget_bytes, parallel_points: a.parallel_points, seed: a.seed };
    let mut all: Vec<BenchRecord> = Vec::new();
    let mut summary = Vec::new();
    for &mech in &a.mechanisms {
        let recs = run_scaling_sweep_with(mech, &n_list, &dims, &opts)?;
        for (metric, label) in [(Metric::Flops, "flops"), (Metric::PeakBytes, "peak_bytes"), (Metric::WallMs, "wall_ms")] {
            let line = match fit_records(&recs, metric) {
                Ok(f) => format!(
                    "{mech:<8} {label:<11} slope {:>6.3}  r2 {:.4}  points {}{}",
                    f.slope,
                    f.r2,
                    f.points,
                    if f.flagged { "  (poor fit)" } else { "" }
                ),
                Err(e) => format!("{mech:<8} {label:<11} no fit: {e}"),
            };
            summary.push(line);
        }
        all.extend(recs);
    }
    emit_csv(&all, &a.out)?;
    for line in summary {
        println!("{line}");
    }
    if let Some(budget) = a.max_batch_budget {
        for &mech in &a.mechanisms {
            let b = max_batch_probe(mech, a.max_batch_n, &dims, budget)?;
            println!("{mech:<8} max batch {b} at N={} within {budget} bytes", a.max_batch_n);
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn stats(dataset: DatasetKind) -> (&'static [f32], &'static [f32]) {
    match dataset {
        DatasetKind::Mnist => (&MNIST_MEAN, &MNIST_STD),
        DatasetKind::Cifar10 => (&CIFAR_MEAN, &CIFAR_STD),
    }
}

/// Image file as a normalized `[1, C, H, W]` batch with the model's channels.
fn image_input(path: &Path, channels: usize, dataset: DatasetKind) -> Result<Tensor<f32>, Failure> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let img = pnm::decode(&bytes).map_err(|m| Failure::Core(Error::Format { path: path.to_path_buf(), offset: 0, msg: m }))?;
    let plane = img.height * img.width;
    let gray: Vec<f32> = (0..plane).map(|i| (0..img.channels).map(|c| img.planes[c * plane + i]).sum::<f32>() / img.channels as f32).collect();
    let (mean, std) = stats(dataset);
    let mut data = Vec::with_capacity(channels * plane);
    for c in 0..channels {
        let src = if img.channels == channels { &img.planes[c * plane..(c + 1) * plane] } else { &gray[..] };
        data.extend(src.iter().map(|&p| (p - mean[c]) / std[c]));
    }
    Ok(Tensor::from_vec(&[1, channels, img.height, img.width], data)?)
}

fn cmd_attnmap(a: &AttnmapArgs, resolved: &str) -> Outcome {
    log_config("attnmap", resolved);
    if a.model.ablation != NormKind::XNorm {
        return Err(Failure::Usage(format!("attnmap needs an xnorm model, got {}", a.model.ablation)));
    }
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Failure::Usage(format!("threshold {} must lie in [0, 1]", a.threshold)));
    }
    let mc = model_config(&a.model, a.data.dataset)?;
    let mut model = UfoViT::<f32>::build(&mc, 0)?;
    load_into(&mut model, &a.checkpoint)?;
    let image = match (&a.image, a.index) {
        (Some(p), _) => image_input(p, mc.in_chans, a.data.dataset)?,
        (None, Some(i)) => {
            let data = load(&a.data, Split::Test)?;
            if i >= data.len() {
                return Err(Failure::Usage(format!("index {i} out of range for {} test samples", data.len())));
            }
            data.batch(&[i]).0
        }
        (None, None) => return Err(Failure::Usage("give --image or --index".into())),
    };
    let (h, w) = (image.shape()[2], image.shape()[3]);
    if h != w || h % mc.patch_size != 0 {
        return Err(Failure::Usage(format!("image is {h}x{w}; it must be square with a side divisible by {}", mc.patch_size)));
    }
    let block = a.block.unwrap_or(mc.class_attn_depth - 1);
    let (u, q) = model.class_attention_inputs(&image, block)?;
    let (n, d) = (u.shape()[0] - 1, mc.dim);
    let patches = Tensor::from_vec(&[n, d], u.data()[d..].to_vec())?;
    let params = model.class_attention_params(block)?;
    let dims = mc.attention_dims(n);
    let mut weights = attention_map_approx(&patches, &q, &params, &dims, a.lambda)?.data().to_vec();
    let peak = weights.iter().copied().fold(0.0, f64::max);
    weights.iter_mut().filter(|v| **v < a.threshold * peak).for_each(|v| *v = 0.0);
    let grid = h / mc.patch_size;
    let mut csv = String::from("row,col,weight\n");
    for (i, v) in weights.iter().enumerate() {
        csv.push_str(&format!("{},{},{v:?}\n", i / grid, i % grid));
    }
    let csv_path = a.out.with_extension("csv");
    let pgm_path = a.out.with_extension("pgm");
    std::fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;
    std::fs::write(&pgm_path, pnm::encode_pgm(grid, grid, &pnm::to_gray(&weights))).map_err(|e| io_err(&pgm_path, e))?;
    println!("wrote {} and {} ({grid}x{grid} patches)", csv_path.display(), pgm_path.display());
    Ok(())
}

fn run(argv: Vec<OsString>) -> Outcome {
    let (cli, resolved) = parse_args(argv)?;
    match &cli.command {
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Train(a) => cmd_train(a, &resolved),
        Cmd::Eval(a) => cmd_eval(a, &resolved),
        Cmd::Info(a) => cmd_info(a),
        Cmd::Bench(a) => cmd_bench(a, &resolved),
        Cmd::Attnmap(a) => cmd_attnmap(a, &resolved),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Clap(e)) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            ExitCode::SUCCESS
        }
        Err(Failure::Clap(e)) => {
            let _ = e.print();
            ExitCode::from(3)
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
