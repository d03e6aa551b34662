use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use opsr_core::deeponet::{Architecture, DeepOnet, InputScaling};
use opsr_core::diagnostics::gradient_suite;
use opsr_core::eval::{
    evaluate_baseline, evaluate_model, spline_reconstruct, sweep, write_aggregates_csv,
    write_field_pgm, write_report_cells, write_report_csv, SweepAxes,
};
use opsr_core::field::{Grid, Grid2D};
use opsr_core::nn::{Activation, AdamConfig};
use opsr_core::pool::{pool, PoolMode, PoolingSpec};
use opsr_core::spectral::{Case, KdvbSolverConfig};
use opsr_core::train::{
    generate_dataset, train_with_progress, write_history_csv, Dataset, GenerationConfig,
    TrainConfig,
};
use opsr_core::Error;

/// File name used when a dataset path names a directory.
const DATASET_FILE: &str = "dataset.osrd";

#[derive(Debug, Parser)]
#[command(name = "opsr", version, about = "Super-resolution of PDE fields with DeepONets and spline baselines")]
struct Cli {
    /// Plain-text file of key=value lines supplying flag values; flags given
    /// on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for generation, evaluation and sweeps (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset of high-resolution solutions.
    Gen(GenArgs),
    /// Train a DeepONet on one pooling configuration.
    Train(TrainArgs),
    /// Score a trained checkpoint on the test split.
    Eval(EvalArgs),
    /// Score the spline baseline on the test split.
    Baseline(BaselineArgs),
    /// Train and score every mode, window and training-set size.
    Sweep(SweepArgs),
    /// Write one snapshot, or its reconstruction, as a PGM image.
    Render(RenderArgs),
    /// Run finite-difference gradient checks and print a table.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    case: Case,
    /// Number of snapshots.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, env = "OPSR_SEED", default_value_t = 0)]
    seed: u64,
    /// Output file, or a directory to hold `dataset.osrd`.
    #[arg(long)]
    out: PathBuf,
    /// KdV-Burgers grid points.
    #[arg(long, default_value_t = 1024)]
    n_grid: usize,
    /// KdV-Burgers time step.
    #[arg(long, default_value_t = 2.5e-4)]
    dt: f64,
    /// KdV-Burgers snapshot time.
    #[arg(long, default_value_t = 1.0)]
    t_final: f64,
    /// Poisson grid points along x.
    #[arg(long, default_value_t = 128)]
    nx: usize,
    /// Poisson grid points along y.
    #[arg(long, default_value_t = 128)]
    ny: usize,
}

/// Model and optimizer settings shared by `train` and `sweep`.
#[derive(Debug, Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, env = "OPSR_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Cosine-anneal the learning rate down to this value [default: constant].
    #[arg(long)]
    final_lr: Option<f64>,
    #[arg(long, default_value_t = 16)]
    snapshots_per_batch: usize,
    /// Query points per snapshot and step.
    #[arg(long, default_value_t = 128)]
    points: usize,
    /// Share one set of query points across the snapshots of a step.
    #[arg(long)]
    shared_points: bool,
    /// Passes over the training snapshots per epoch.
    #[arg(long, default_value_t = 1)]
    point_rounds: usize,
    #[arg(long, default_value_t = Activation::Softplus)]
    branch_activation: Activation,
    #[arg(long, default_value_t = Activation::Softplus)]
    trunk_activation: Activation,
    /// per_feature or global.
    #[arg(long, default_value_t = InputScaling::PerFeature)]
    input_scaling: InputScaling,
    /// Dense branch widths ending at p [default: 256,256,256,128 for kdvb; 512,256,256,128 for poisson].
    #[arg(long, value_delimiter = ',')]
    branch_widths: Option<Vec<usize>>,
    /// Dense trunk widths ending at p [default: 128,128,128,128].
    #[arg(long, value_delimiter = ',')]
    trunk_widths: Option<Vec<usize>>,
    /// Batch-norm between dense branch layers [default: true for poisson, false for kdvb].
    #[arg(long)]
    branch_batchnorm: Option<bool>,
}

impl TrainOpts {
    fn architecture(&self, case: Case, spec: PoolingSpec, grid: &Grid) -> opsr_core::Result<Architecture> {
        let mut arch = Architecture::defaults(case, spec, grid)?;
        arch.branch_activation = self.branch_activation;
        arch.trunk_activation = self.trunk_activation;
        arch.input_scaling = self.input_scaling;
        if let Some(w) = &self.branch_widths {
            arch.branch_widths = w.clone();
        }
        if let Some(w) = &self.trunk_widths {
            arch.trunk_widths = w.clone();
        }
        if let Some(bn) = self.branch_batchnorm {
            arch.branch_batchnorm = bn;
        }
        arch.validate()?;
        Ok(arch)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            snapshots_per_batch: self.snapshots_per_batch,
            points_per_snapshot: self.points,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            seed: self.seed,
            shared_points: self.shared_points,
            point_rounds: self.point_rounds,
            final_lr: self.final_lr,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset file or directory.
    #[arg(long)]
    data: PathBuf,
    /// avg or max.
    #[arg(long)]
    mode: PoolMode,
    /// Pooling window.
    #[arg(long)]
    m: usize,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Train on the first N training snapshots [default: all].
    #[arg(long)]
    n_train: Option<usize>,
    /// Evaluate the test split every this many epochs (0 disables).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Rewrite the checkpoint every this many epochs (0 disables).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Per-epoch history CSV [default: none].
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Per-snapshot error CSV.
    #[arg(long)]
    out: PathBuf,
    /// Training-set size recorded in the report [default: the dataset's training split].
    #[arg(long)]
    n_train: Option<usize>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mode: PoolMode,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for per-cell CSVs, the combined report and the aggregates.
    #[arg(long)]
    out: PathBuf,
    /// Training-set sizes [default: 45,90,225,450,900 up to the training split].
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Pooling modes [default: avg,max].
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<PoolMode>>,
    /// Pooling windows [default: 8,16,32 for kdvb; 4,8,16 for poisson].
    #[arg(long, value_delimiter = ',')]
    ms: Option<Vec<usize>>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    /// Snapshot index in the dataset.
    #[arg(long)]
    snapshot: usize,
    /// Image to write; 1D fields also get a companion CSV.
    #[arg(long)]
    out: PathBuf,
    /// Render the spline reconstruction from this pooling mode instead of the field.
    #[arg(long, requires = "m", conflicts_with = "ckpt")]
    mode: Option<PoolMode>,
    #[arg(long, requires = "mode")]
    m: Option<usize>,
    /// Render this checkpoint's prediction instead of the field.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, env = "OPSR_SEED", default_value_t = 0)]
    seed: u64,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidGrid(_)
            | Error::Empty(_)
            | Error::GridMismatch
            | Error::Shape(_)
            | Error::InvalidParameter(_)
            | Error::PoolWindow { .. }
            | Error::InvalidKnots(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
        {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Splice `--config` entries into the argument list as flags the user did
/// not give explicitly.
fn expand_config(mut args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let Some(s) = a.to_str() else { continue };
        if s == "--config" {
            path = Some(PathBuf::from(args.get(i + 1).ok_or("--config needs a file")?));
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(&path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let cli = Cli::command();
    let sub = args
        .iter()
        .skip(1)
        .filter_map(|a| a.to_str())
        .find_map(|a| cli.find_subcommand(a))
        .ok_or("--config needs a subcommand")?;
    let given: Vec<String> = args
        .iter()
        .filter_map(|a| a.to_str())
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let where_ = || format!("{} line {}", path.display(), n + 1);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}: expected key=value", where_()))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let arg = sub
            .get_arguments()
            .chain(cli.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| format!("{}: unknown key {key} for {}", where_(), sub.get_name()))?;
        if given.contains(&key) {
            continue;
        }
        if arg.get_action().takes_values() {
            extra.push(format!("--{key}"));
            extra.push(value.to_string());
        } else {
            match value {
                "true" => extra.push(format!("--{key}")),
                "false" => {}
                _ => return Err(format!("{}: {key} expects true or false", where_())),
            }
        }
    }
    args.extend(extra.into_iter().map(OsString::from));
    Ok(args)
}

fn dataset_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(DATASET_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(&dataset_path(path)).map_err(|e| Failure::Runtime(e.to_string()))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Baseline(a) => baseline_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn gen(a: GenArgs) -> Result<(), Failure> {
    if a.n == 0 {
        return Err(Failure::Invalid("--n must be positive".into()));
    }
    let kdvb = KdvbSolverConfig {
        dt: a.dt,
        t_final: a.t_final,
        ..KdvbSolverConfig::with_grid(a.n_grid)
    };
    kdvb.validate()?;
    let config = GenerationConfig {
        kdvb,
        poisson_grid: Grid2D::new(a.nx, a.ny)?,
    };
    let out = if a.out.is_dir() || a.out.to_string_lossy().ends_with('/') {
        fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
        a.out.join(DATASET_FILE)
    } else {
        a.out
    };
    let dataset = generate_dataset(a.case, a.n, a.seed, &config)?;
    dataset.save(&out)?;
    println!("{}", out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&a.data)?;
    let spec = PoolingSpec::new(a.mode, a.m)?;
    spec.check(&dataset.grid.dims())?;
    let arch = a.opts.architecture(dataset.case, spec, &dataset.grid)?;
    let config = TrainConfig {
        eval_every: a.eval_every,
        checkpoint_every: a.checkpoint_every,
        checkpoint_path: Some(a.out.clone()),
        ..a.opts.train_config()
    };
    config.validate(&dataset.grid)?;
    let dataset = match a.n_train {
        Some(n) => dataset.with_train_size(n)?,
        None => dataset,
    };
    let model = DeepOnet::new(arch, a.opts.seed)?;
    let outcome = train_with_progress(model, &dataset, spec, &config, |row| match row.test_epsilon {
        Some(e) => eprintln!("epoch {} loss {:.6e} test_eps {:.6e}", row.epoch, row.mean_loss, e),
        None => eprintln!("epoch {} loss {:.6e}", row.epoch, row.mean_loss),
    })?;
    if let Some(path) = &a.history {
        write_history_csv(&outcome.history, path)?;
    }
    println!("{}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&a.data)?;
    let (model, _) = DeepOnet::load(&a.ckpt)?;
    let spec = model.architecture().pooling;
    let n_train = a.n_train.unwrap_or(dataset.train.len());
    let report = evaluate_model(&model, &dataset, spec, n_train)?;
    write_report_csv(&report, &a.out)?;
    println!("mean_epsilon {:.6e}", report.mean_epsilon("deeponet")?);
    Ok(())
}

fn baseline_cmd(a: BaselineArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&a.data)?;
    let spec = PoolingSpec::new(a.mode, a.m)?;
    spec.check(&dataset.grid.dims())?;
    let report = evaluate_baseline(&dataset, spec, dataset.train.len())?;
    write_report_csv(&report, &a.out)?;
    println!("mean_epsilon {:.6e}", report.mean_epsilon("spline")?);
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&a.data)?;
    let mut axes = SweepAxes::defaults(dataset.case, dataset.train.len());
    if let Some(s) = a.sizes {
        axes.sizes = s;
    }
    if let Some(m) = a.modes {
        axes.modes = m;
    }
    if let Some(w) = a.ms {
        axes.windows = w;
    }
    let case = dataset.case;
    for &mode in &axes.modes {
        for &m in &axes.windows {
            let spec = PoolingSpec::new(mode, m)?;
            spec.check(&dataset.grid.dims())?;
            a.opts.architecture(case, spec, &dataset.grid)?;
        }
    }
    let config = a.opts.train_config();
    config.validate(&dataset.grid)?;
    let opts = &a.opts;
    let build = move |spec: PoolingSpec, grid: &Grid| opts.architecture(case, spec, grid);
    let report = sweep(&dataset, &axes, &build, &config)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    write_report_cells(&report, &a.out)?;
    write_report_csv(&report, &a.out.join("report.csv"))?;
    write_aggregates_csv(&report, &a.out.join("aggregates.csv"))?;
    for agg in report.aggregates() {
        println!(
            "{} {} M={} n_train={} {} mean_eps {:.6e}",
            agg.case, agg.pool_mode, agg.m, agg.n_train, agg.method, agg.mean
        );
    }
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&a.data)?;
    let snapshot = dataset.snapshots.get(a.snapshot).ok_or_else(|| {
        Failure::Invalid(format!(
            "snapshot {} out of range: dataset has {}",
            a.snapshot,
            dataset.len()
        ))
    })?;
    let field = if let Some(path) = &a.ckpt {
        let (model, _) = DeepOnet::load(path)?;
        let spec = model.architecture().pooling;
        let input = pool(&snapshot.field, spec, a.snapshot)?;
        model.predict_field(&input, &dataset.grid)?
    } else if let (Some(mode), Some(m)) = (a.mode, a.m) {
        spline_reconstruct(&snapshot.field, PoolingSpec::new(mode, m)?, a.snapshot)?
    } else {
        snapshot.field.clone()
    };
    write_field_pgm(&field, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<(), Failure> {
    let rows = gradient_suite(a.seed)?;
    println!("{:<34} {:>12} {:>10} {:>8}  status", "check", "max_rel_err", "tolerance", "entries");
    let mut ok = true;
    for r in &rows {
        ok &= r.passes();
        println!(
            "{:<34} {:>12.3e} {:>10.0e} {:>8}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.checked,
            if r.passes() { "pass" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check exceeded tolerance".into()))
    }
}
