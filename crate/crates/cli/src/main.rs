//! `mfnet`: dataset generation, CRF training, mean field and Mean Field
//! Network experiments on the synthetic letter-denoising benchmark.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numerical failure.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use mfnet::crf::{self, BaselineConfig, CrfInstance, CrfParams};
use mfnet::data::{self, DatasetConfig, LabeledImage, RenderConfig};
use mfnet::gradcheck::{self, GradCheckConfig, LossKind};
use mfnet::mfn::{self, DiscriminativeConfig, InferenceTrainConfig, MfnParams, Phase};
use mfnet::{mrf, Assignment, ScheduleKind};

/// Largest relative error `grad-check` accepts.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "mfnet",
    version,
    about = "Mean field and Mean Field Network experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/test letter images.
    GenData(GenData),
    /// Train the baseline CRF by approximate maximum likelihood.
    TrainCrf(TrainCrf),
    /// Run plain mean field with a trained CRF and report KL and accuracy.
    RunMf(RunMf),
    /// Train an untied network to approximate the CRF in KL.
    TrainMfnInference(TrainMfnInference),
    /// Train a network as a discriminative model with the hinge loss.
    TrainMfnDisc(TrainMfnDisc),
    /// Evaluate a CRF or network and write per-image predictions.
    Eval(Eval),
    /// Compare back-propagated gradients with finite differences.
    GradCheck(GradCheck),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Checkerboard,
    Raster,
}

impl From<ScheduleArg> for ScheduleKind {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Checkerboard => ScheduleKind::Checkerboard,
            ScheduleArg::Raster => ScheduleKind::Raster,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Debug, Args)]
struct GenData {
    /// Output directory; `train/` and `test/` are created inside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Images per split.
    #[arg(long, default_value_t = data::DEFAULT_IMAGES)]
    n: usize,
    #[arg(long, default_value_t = data::DEFAULT_FLIP_P)]
    flip_p: f64,
    #[arg(long, default_value_t = data::DEFAULT_SIGMA)]
    sigma: f64,
}

#[derive(Debug, Args)]
struct TrainCrf {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the trained parameters (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Starting parameters; the all-ones initialisation when omitted.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    mf_iters: usize,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Checkerboard)]
    schedule: ScheduleArg,
    /// JSON-lines training log; stderr when omitted.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunMf {
    /// CRF parameters (JSON).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Number of mean field iterations.
    #[arg(long)]
    iters: usize,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Checkerboard)]
    schedule: ScheduleArg,
}

#[derive(Debug, Args)]
struct TrainMfnInference {
    /// CRF parameters the network should approximate.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Network depth.
    #[arg(long)]
    layers: usize,
    #[arg(long, default_value_t = mfn::DEFAULT_INFERENCE_PHASE.learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = mfn::DEFAULT_INFERENCE_PHASE.momentum)]
    momentum: f64,
    #[arg(long, default_value_t = mfn::DEFAULT_INFERENCE_PHASE.steps)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Checkerboard)]
    schedule: ScheduleArg,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainMfnDisc {
    /// CRF parameters used to initialise every layer.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// Mislabeling cost of the hinge loss.
    #[arg(long, default_value_t = mfn::DEFAULT_HINGE_COST)]
    c: f64,
    #[arg(long, default_value_t = 50)]
    phase1_steps: usize,
    #[arg(long, default_value_t = 0.0005)]
    phase1_lr: f64,
    #[arg(long, default_value_t = 0.5)]
    phase1_momentum: f64,
    /// Steps after untying; 0 keeps the tied network.
    #[arg(long, default_value_t = 200)]
    phase2_steps: usize,
    #[arg(long, default_value_t = 0.002)]
    phase2_lr: f64,
    #[arg(long, default_value_t = 0.9)]
    phase2_momentum: f64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Checkerboard)]
    schedule: ScheduleArg,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Eval {
    /// CRF parameters or network parameters (JSON).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Iterations / layers; implied by untied networks.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Checkerboard)]
    schedule: ScheduleArg,
    /// Directory for the predicted label images.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Kl,
    Hinge,
    Both,
}

#[derive(Debug, Args)]
struct GradCheck {
    #[arg(long, default_value_t = 6)]
    height: usize,
    #[arg(long, default_value_t = 6)]
    width: usize,
    /// Network depth; 1, 2 and 3 are all checked when omitted.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, value_enum, default_value_t = LossArg::Both)]
    loss: LossArg,
    /// Restrict to one schedule; both are checked when omitted.
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Numerical(String),
}

impl From<mfnet::Error> for Failure {
    fn from(e: mfnet::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Invalid(format!("{}: {e}", path.display()))
}

type CliResult<T> = Result<T, Failure>;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn print_json(value: &impl Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("metrics serialize")
    );
}

/// Destination for JSON-lines metrics.
struct MetricsLog {
    out: Box<dyn Write>,
    path: Option<PathBuf>,
}

impl MetricsLog {
    fn open(path: Option<&Path>) -> CliResult<Self> {
        Ok(match path {
            Some(p) => {
                let file = File::create(p).map_err(|e| io_failure(p, e))?;
                Self {
                    out: Box::new(BufWriter::new(file)),
                    path: Some(p.to_owned()),
                }
            }
            None => Self {
                out: Box::new(io::stderr()),
                path: None,
            },
        })
    }

    fn row(&mut self, value: &impl Serialize) {
        let line = serde_json::to_string(value).expect("metrics serialize");
        // A failed log write should not abort training; it is reported at close.
        let _ = writeln!(self.out, "{line}");
    }

    fn close(mut self) -> CliResult<()> {
        self.out.flush().map_err(|e| match &self.path {
            Some(p) => io_failure(p, e),
            None => Failure::Invalid(e.to_string()),
        })
    }
}

fn load_split(root: &Path, split: SplitArg) -> CliResult<Vec<LabeledImage>> {
    let manifest = root.join(split.name()).join("manifest.json");
    Ok(data::load_split(&manifest)?.1)
}

fn instances(images: &[LabeledImage]) -> Vec<(CrfInstance, Assignment)> {
    images
        .par_iter()
        .map(|img| (CrfInstance::new(&img.input), img.label.clone()))
        .collect()
}

fn load_crf(path: &Path) -> CliResult<CrfParams> {
    Ok(CrfParams::from_json(&read_text(path)?)?)
}

fn check_positive(name: &str, v: usize) -> CliResult<()> {
    if v == 0 {
        return Err(Failure::Invalid(format!("--{name} must be at least 1")));
    }
    Ok(())
}

fn check_rate(name: &str, v: f64) -> CliResult<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(Failure::Invalid(format!(
            "--{name} must be a finite non-negative number"
        )));
    }
    Ok(())
}

fn gen_data(args: GenData) -> CliResult<()> {
    let config = DatasetConfig {
        n_images: args.n,
        seed: args.seed,
        flip_p: args.flip_p,
        sigma: args.sigma,
        render: RenderConfig::default(),
    };
    let (train, test) = data::write_dataset(&args.out, &config)?;
    print_json(&json!({ "train_manifest": train, "test_manifest": test }));
    Ok(())
}

fn train_crf(args: TrainCrf) -> CliResult<()> {
    check_rate("lr", args.lr)?;
    let train = instances(&load_split(&args.data, SplitArg::Train)?);
    let init = match &args.init {
        Some(p) => load_crf(p)?,
        None => CrfParams::theta0(),
    };
    let config = BaselineConfig {
        steps: args.steps,
        learning_rate: args.lr,
        mf_iters: args.mf_iters,
        schedule: args.schedule.into(),
    };
    let mut log = MetricsLog::open(args.metrics.as_deref())?;
    let theta = crf::train_baseline(&train, init, &config, |s| log.row(s))?;
    log.close()?;
    write_text(&args.out, &theta.to_json())?;
    print_json(&json!({ "params": args.out, "n_params": crf::N_PARAMS }));
    Ok(())
}

#[derive(Debug, Serialize)]
struct ImageScore {
    kl: f64,
    accuracy: f64,
}

fn run_mf(args: RunMf) -> CliResult<()> {
    let theta = load_crf(&args.model)?;
    let images = instances(&load_split(&args.data, args.split)?);
    let kind: ScheduleKind = args.schedule.into();
    let scores: Vec<ImageScore> = images
        .par_iter()
        .map(|(inst, label)| {
            let grid = inst.grid();
            let schedule = kind.for_grid(grid.height(), grid.width());
            let mrf = inst.build_mrf(&theta);
            let q = mfnet::meanfield::run(
                &mrf,
                &mrf::softmax_init(&mrf),
                args.iters,
                &schedule,
                false,
            )?
            .q;
            Ok(ImageScore {
                kl: mrf::unnormalized_kl(&q, &mrf)?,
                accuracy: data::pixel_accuracy(&crf::decode(&q), label)?,
            })
        })
        .collect::<mfnet::Result<_>>()?;
    let n = scores.len() as f64;
    print_json(&json!({
        "iters": args.iters,
        "schedule": kind.to_string(),
        "split": args.split.name(),
        "mean_kl": scores.iter().map(|s| s.kl).sum::<f64>() / n,
        "accuracy": scores.iter().map(|s| s.accuracy).sum::<f64>() / n,
        "per_image": scores,
    }));
    Ok(())
}

fn train_mfn_inference(args: TrainMfnInference) -> CliResult<()> {
    check_positive("layers", args.layers)?;
    check_rate("lr", args.lr)?;
    check_rate("momentum", args.momentum)?;
    let theta = load_crf(&args.model)?;
    let train: Vec<CrfInstance> = instances(&load_split(&args.data, SplitArg::Train)?)
        .into_iter()
        .map(|(inst, _)| inst)
        .collect();
    let config = InferenceTrainConfig {
        depth: args.layers,
        schedule: args.schedule.into(),
        phase: Phase {
            steps: args.steps,
            learning_rate: args.lr,
            momentum: args.momentum,
        },
    };
    let mut log = MetricsLog::open(args.metrics.as_deref())?;
    let mut last_loss = f64::NAN;
    let params = mfn::train_inference(&train, &theta, &config, |s| {
        last_loss = s.loss;
        log.row(s)
    })?;
    log.close()?;
    write_text(&args.out, &params.to_json())?;
    print_json(&json!({ "params": args.out, "layers": args.layers, "final_train_kl": last_loss }));
    Ok(())
}

fn train_mfn_disc(args: TrainMfnDisc) -> CliResult<()> {
    check_positive("layers", args.layers)?;
    for (name, v) in [
        ("phase1-lr", args.phase1_lr),
        ("phase1-momentum", args.phase1_momentum),
        ("phase2-lr", args.phase2_lr),
        ("phase2-momentum", args.phase2_momentum),
    ] {
        check_rate(name, v)?;
    }
    if args.c.is_nan() || args.c <= 0.0 {
        return Err(Failure::Invalid("--c must be positive".into()));
    }
    let theta = load_crf(&args.model)?;
    let train = instances(&load_split(&args.data, SplitArg::Train)?);
    let config = DiscriminativeConfig {
        depth: args.layers,
        schedule: args.schedule.into(),
        hinge_cost: args.c,
        tied: Phase {
            steps: args.phase1_steps,
            learning_rate: args.phase1_lr,
            momentum: args.phase1_momentum,
        },
        untied: Phase {
            steps: args.phase2_steps,
            learning_rate: args.phase2_lr,
            momentum: args.phase2_momentum,
        },
    };
    let mut log = MetricsLog::open(args.metrics.as_deref())?;
    let outcome = mfn::train_discriminative(&train, &theta, &config, |s| log.row(s))?;
    log.close()?;
    let params = if args.phase2_steps == 0 {
        outcome.tied
    } else {
        outcome.untied
    };
    write_text(&args.out, &params.to_json())?;
    print_json(&json!({ "params": args.out, "layers": args.layers, "tied": params.tied }));
    Ok(())
}

/// Either a CRF (run as a tied network) or a network.
fn load_model(path: &Path) -> CliResult<MfnParams> {
    let text = read_text(path)?;
    match MfnParams::from_json(&text) {
        Ok(p) => Ok(p),
        Err(net_err) => match CrfParams::from_json(&text) {
            Ok(theta) => Ok(MfnParams::tied(theta)),
            Err(_) => Err(net_err.into()),
        },
    }
}

fn eval(args: Eval) -> CliResult<()> {
    let params = load_model(&args.model)?;
    let depth = match (args.iters, params.implied_depth()) {
        (Some(m), _) => m,
        (None, Some(m)) => m,
        (None, None) => {
            return Err(Failure::Invalid(
                "--iters is required for tied models".into(),
            ));
        }
    };
    params.check_depth(depth)?;
    let images = load_split(&args.data, args.split)?;
    let kind: ScheduleKind = args.schedule.into();
    fs::create_dir_all(&args.out_dir).map_err(|e| io_failure(&args.out_dir, e))?;
    let results: Vec<(f64, String)> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let inst = CrfInstance::new(&img.input);
            let schedule = kind.for_grid(img.input.height(), img.input.width());
            let trace = mfn::forward(&inst, &params, depth, &schedule)?;
            let pred = mfn::predict(&trace);
            let name = format!("pred_{i:03}.pgm");
            let bytes = data::encode_label(img.input.width(), img.input.height(), pred.labels());
            let path = args.out_dir.join(&name);
            fs::write(&path, bytes).map_err(|e| io_failure(&path, e))?;
            Ok((data::pixel_accuracy(&pred, &img.label)?, name))
        })
        .collect::<CliResult<_>>()?;
    let per_image: Vec<f64> = results.iter().map(|r| r.0).collect();
    print_json(&json!({
        "iters": depth,
        "schedule": kind.to_string(),
        "split": args.split.name(),
        "mean_accuracy": per_image.iter().sum::<f64>() / per_image.len() as f64,
        "per_image_accuracy": per_image,
        "outputs": results.iter().map(|r| &r.1).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn grad_check(args: GradCheck) -> CliResult<()> {
    check_positive("height", args.height)?;
    check_positive("width", args.width)?;
    if !(args.step > 0.0 && args.step.is_finite()) {
        return Err(Failure::Invalid("--step must be positive".into()));
    }
    let depths = match args.layers {
        Some(m) => {
            check_positive("layers", m)?;
            vec![m]
        }
        None => vec![1, 2, 3],
    };
    let losses = match args.loss {
        LossArg::Kl => vec![LossKind::Kl],
        LossArg::Hinge => vec![LossKind::Hinge],
        LossArg::Both => vec![LossKind::Kl, LossKind::Hinge],
    };
    let schedules: Vec<ScheduleKind> = match args.schedule {
        Some(s) => vec![s.into()],
        None => vec![ScheduleKind::Checkerboard, ScheduleKind::Raster],
    };
    let mut configs = Vec::new();
    for &loss in &losses {
        for &depth in &depths {
            for tied in [true, false] {
                for &schedule in &schedules {
                    configs.push(GradCheckConfig {
                        height: args.height,
                        width: args.width,
                        depth,
                        tied,
                        schedule,
                        loss,
                        seed: args.seed,
                        step: args.step,
                    });
                }
            }
        }
    }
    let reports = configs
        .par_iter()
        .map(gradcheck::run)
        .collect::<mfnet::Result<Vec<_>>>()?;
    let worst = reports
        .iter()
        .map(|r| r.max_relative_error)
        .fold(0.0, f64::max);
    let passed = worst < GRAD_TOLERANCE;
    print_json(&json!({
        "max_relative_error": worst,
        "tolerance": GRAD_TOLERANCE,
        "passed": passed,
        "runs": reports,
    }));
    if passed {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "max relative error {worst:e} exceeds {GRAD_TOLERANCE:e}"
        )))
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("MFN_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Invalid(format!("MFN_THREADS={value:?} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Invalid(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainCrf(a) => train_crf(a),
        Command::RunMf(a) => run_mf(a),
        Command::TrainMfnInference(a) => train_mfn_inference(a),
        Command::TrainMfnDisc(a) => train_mfn_disc(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
