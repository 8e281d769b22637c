use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use kbf_core::dataset::{generate, InitialStates, SamplingSpec};
use kbf_core::evaluation::{
    ablation_csv, ablation_study, default_mode, horizon_sweep, prediction_error, sweep_csv,
    timing_benchmark, timing_csv,
};
use kbf_core::experiment::{run_experiment, ExperimentConfig};
use kbf_core::kbf::trajectory_csv;
use kbf_core::training::{train, LossWeights};
use kbf_core::{
    Dataset, Error, Method, Model, PendulumVariant, PredictionMode, QuadratureOrder, SystemKind,
    TrainConfig,
};

/// Root for `repro` outputs when neither `--out` nor the config names one.
const OUTPUT_DIR_ENV: &str = "KBF_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "kbf",
    version,
    about = "Learn and evaluate Koopman bilinear models of control-affine systems"
)]
struct Cli {
    /// Worker threads for data generation and sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate trajectories and write a dataset file.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainCmd),
    /// Roll a trained model out from one initial state.
    Predict(PredictArgs),
    /// Score a model on test data, or run a horizon sweep or ablation.
    Eval(EvalArgs),
    /// Time training epochs of both methods against the horizon.
    Bench(BenchArgs),
    /// Run complete studies from experiment config files.
    Repro(ReproArgs),
    /// Write the exact bilinear model of the parabolic system.
    Oracle(OracleArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// parabolic or double-pendulum.
    #[arg(long)]
    system: String,
    /// Double-pendulum equations: verbatim or conventional.
    #[arg(long)]
    variant: Option<String>,
    /// Random initial states.
    #[arg(long, conflicts_with = "grid")]
    count: Option<usize>,
    /// Grid points per state dimension.
    #[arg(long)]
    grid: Option<usize>,
    /// Initial-state box; one pair for every dimension, or one pair per dimension.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_hyphen_values = true, action = clap::ArgAction::Append)]
    x0_range: Vec<f64>,
    /// Input box; one pair for every input, or one pair per input.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_hyphen_values = true, action = clap::ArgAction::Append)]
    u_range: Vec<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Integration steps per trajectory.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Times the step input is redrawn during a trajectory.
    #[arg(long, default_value_t = 0)]
    input_switches: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Training settings; any flag given overrides the `--config` file.
#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    /// JSON training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// blo, slo-1, slo-n, blo-none or blo-initial [default: blo].
    #[arg(long)]
    method: Option<Method>,
    /// [default: 6]
    #[arg(long)]
    horizon: Option<usize>,
    /// Quadrature order 0, 1 or 3 [default: 3].
    #[arg(long)]
    order: Option<u8>,
    /// [default: 800]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    batches: Option<usize>,
    /// [default: 1e-4 bi-level, 1e-3 single-level]
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-level loss weights: encoder, decoder, reconstruction.
    #[arg(long, num_args = 3, value_names = ["E", "D", "R"])]
    loss_weights: Option<Vec<f64>>,
}

impl TrainFlags {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let cfg = self.resolve_unchecked()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_unchecked(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    message: e.to_string(),
                    line: e.line(),
                    column: e.column(),
                })?
            }
            None => TrainConfig::default(),
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(p) = self.order {
            cfg.quadrature_order = QuadratureOrder::try_from(p)?;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batches {
            cfg.batches = b;
        }
        if self.lr.is_some() {
            cfg.learning_rate = self.lr;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = &self.loss_weights {
            cfg.loss_weights = LossWeights {
                encoder: w[0],
                decoder: w[1],
                reconstruction: w[2],
            };
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    flags: TrainFlags,
    /// Training dataset (normalized here with its own ranges if raw).
    #[arg(long)]
    data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV (a JSON summary is written next to it) [default: <out>.curve.csv].
    #[arg(long)]
    report: Option<PathBuf>,
    /// Test dataset scored after training.
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Initial state, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    x0: String,
    /// One input vector held throughout (`0.1,0,0`), one per step separated
    /// by `;`, or a CSV file with one input per row.
    #[arg(long, allow_hyphen_values = true)]
    inputs: String,
    #[arg(long)]
    dt: f64,
    #[arg(long)]
    steps: usize,
    /// continuous or zoh [default: the model's own].
    #[arg(long)]
    mode: Option<PredictionMode>,
    /// Output CSV [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model to score.
    #[arg(long, required_unless_present_any = ["sweep", "ablation"])]
    model: Option<PathBuf>,
    /// Test data; with --sweep or --ablation, the training data.
    #[arg(long)]
    data: PathBuf,
    /// Test data for --sweep.
    #[arg(long)]
    test: Option<PathBuf>,
    /// continuous or zoh [default: the model's own].
    #[arg(long)]
    mode: Option<PredictionMode>,
    /// Train and score one model per horizon.
    #[arg(long, requires = "test", conflicts_with = "ablation")]
    sweep: bool,
    /// Comma-separated horizons for --sweep.
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<usize>,
    /// Compare the three system-matrix strategies.
    #[arg(long)]
    ablation: bool,
    #[command(flatten)]
    flags: TrainFlags,
    /// Report CSV (plus JSON summary) [default: print only].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    horizons: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    probe_epochs: usize,
    /// Interleaved repetitions; each cell reports its median.
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    /// Windows per horizon [default: as many as the longest horizon allows].
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long, default_value_t = 16)]
    batches: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReproArgs {
    /// Experiment config files.
    #[arg(required = true)]
    configs: Vec<PathBuf>,
    /// Root output directory; each study writes to a subdirectory named after it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
    mu: f64,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        log::warn!("thread pool already initialized: {e}");
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|cause| {
        cause.downcast_ref::<Error>().is_some_and(Error::is_usage) || cause.is::<UsageError>()
    });
    if usage {
        2
    } else {
        1
    }
}

/// Bad command-line input that clap cannot catch on its own.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Repro(a) => cmd_repro(a),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

fn ranges(flat: &[f64], dim: usize, what: &str) -> anyhow::Result<Option<Vec<[f64; 2]>>> {
    let pairs: Vec<[f64; 2]> = flat.chunks(2).map(|c| [c[0], c[1]]).collect();
    match pairs.len() {
        0 => Ok(None),
        1 => Ok(Some(vec![pairs[0]; dim])),
        k if k == dim => Ok(Some(pairs)),
        k => Err(usage(format!("{what} has {k} ranges; give one or {dim}"))),
    }
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let mut kind = SystemKind::from_name(&a.system)?;
    if let Some(v) = &a.variant {
        let SystemKind::DoublePendulum { variant } = &mut kind else {
            return Err(usage("--variant only applies to the double pendulum"));
        };
        *variant = serde_json::from_value::<PendulumVariant>(serde_json::Value::String(v.clone()))
            .map_err(|_| {
                usage(format!(
                    "unknown variant '{v}' (expected 'verbatim' or 'conventional')"
                ))
            })?;
    }
    let system = kind.build::<f64>();
    let mut spec = match kind {
        SystemKind::Parabolic { .. } => SamplingSpec::parabolic_train(a.seed),
        SystemKind::DoublePendulum { .. } => SamplingSpec::pendulum_train(a.seed),
    };
    if let Some(count) = a.count {
        spec.initial = InitialStates::Random { count };
    }
    if let Some(per_dim) = a.grid {
        spec.initial = InitialStates::Grid { per_dim };
    }
    if let Some(r) = ranges(&a.x0_range, system.state_dim(), "--x0-range")? {
        spec.x0_range = r;
    }
    if let Some(r) = ranges(&a.u_range, system.input_dim(), "--u-range")? {
        spec.u_range = r;
    }
    if let Some(dt) = a.dt {
        spec.dt = dt;
    }
    if let Some(steps) = a.steps {
        spec.steps = steps;
    }
    spec.input_switches = a.input_switches;

    let generated = generate(system.as_ref(), &spec)?;
    if generated.excluded > 0 {
        log::warn!("dropped {} trajectories that blew up", generated.excluded);
    }
    generated.set.save(&a.out)?;
    log::info!(
        "wrote {} trajectories of {} samples to {}",
        generated.set.len(),
        generated.set.samples_per_trajectory(),
        a.out.display()
    );
    Ok(())
}

fn load_training_data(path: &Path) -> anyhow::Result<Dataset> {
    let data = Dataset::load(path)?;
    Ok(if data.scaler.is_some() {
        data
    } else {
        data.normalize()?
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn cmd_train(a: TrainCmd) -> anyhow::Result<()> {
    let cfg = a.flags.resolve()?;
    let data = load_training_data(&a.data)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| sibling(&a.out, "curve.csv"));
    log::info!(
        "training {} (N = {}) on {} trajectories for {} epochs",
        cfg.method,
        cfg.effective_horizon(),
        data.len(),
        cfg.epochs
    );
    let (model, mut report) = match train(&data, &cfg) {
        Ok(trained) => trained,
        Err(Error::TrainingDiverged { epoch, partial }) => {
            partial.save(&report_path)?;
            bail!(Error::TrainingDiverged { epoch, partial });
        }
        Err(e) => return Err(e.into()),
    };
    model.save(&a.out)?;
    report.model_path = Some(a.out.display().to_string());
    if let Some(test_path) = &a.test {
        let test = Dataset::load(test_path)?;
        let errors = prediction_error(&model, &test, default_mode(&model))?;
        println!(
            "test error: {:.3}% ({})",
            errors.aggregate_percent, errors.metric
        );
        if !errors.diverged.is_empty() {
            println!("diverged trajectories: {}", errors.diverged.len());
        }
        report.final_test_error = Some(errors.aggregate_percent);
        errors.save(sibling(&a.out, "errors.csv"))?;
    }
    report.save(&report_path)?;
    if let Some(last) = report.last() {
        println!("final loss: {:.6e} after {} epochs", last.total, last.epoch);
    }
    Ok(())
}

fn parse_vector(text: &str, what: &str) -> anyhow::Result<DVector<f64>> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("bad {what} '{text}': {e}")))?;
    Ok(DVector::from_vec(values))
}

fn parse_inputs(spec: &str) -> anyhow::Result<Vec<DVector<f64>>> {
    let path = Path::new(spec);
    if path.is_file() {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match parse_vector(line, "input row") {
                Ok(v) => rows.push(v),
                // tolerate a header line
                Err(_) if i == 0 => continue,
                Err(e) => return Err(e.context(format!("{}:{}", path.display(), i + 1))),
            }
        }
        return Ok(rows);
    }
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_vector(s, "input"))
        .collect()
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let model = Model::load(&a.model)?;
    let x0 = parse_vector(&a.x0, "initial state")?;
    let inputs = parse_inputs(&a.inputs)?;
    let mode = a.mode.unwrap_or_else(|| default_mode(&model));
    let traj = model.predict(&x0, &inputs, a.dt, a.steps, mode)?;
    let csv = trajectory_csv(&traj, a.dt);
    match &a.out {
        Some(path) => {
            std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn write_out(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    if a.sweep {
        if a.horizons.is_empty() {
            return Err(usage("--sweep needs --horizons"));
        }
        let template = a.flags.resolve_unchecked()?;
        let data = load_training_data(&a.data)?;
        let test = Dataset::load(a.test.as_deref().expect("clap enforces --test"))?;
        let rows = horizon_sweep(&data, &test, &template, &a.horizons, a.mode);
        let csv = sweep_csv(&rows);
        print!("{csv}");
        if let Some(out) = &a.out {
            write_out(out, &csv)?;
        }
        return Ok(());
    }
    if a.ablation {
        let cfg = a.flags.resolve()?;
        let data = load_training_data(&a.data)?;
        let rows = ablation_study(&data, &cfg)?;
        for row in &rows {
            let status = match row.diverged_at {
                Some(epoch) => format!("diverged at epoch {epoch}"),
                None => format!("reduction {:.3e}", row.reduction),
            };
            println!(
                "{:<12} initial {:.6e}  final {:.6e}  {status}",
                row.strategy, row.initial_loss, row.final_loss
            );
        }
        if let Some(out) = &a.out {
            write_out(out, &ablation_csv(&rows))?;
        }
        return Ok(());
    }
    let model_path = a.model.as_deref().expect("clap enforces --model");
    let model = Model::load(model_path)?;
    let test = Dataset::load(&a.data)?;
    let mode = a.mode.unwrap_or_else(|| default_mode(&model));
    let report = prediction_error(&model, &test, mode)?;
    println!(
        "{} trajectories, {} steps, {} prediction: {:.3}% ({})",
        report.per_trajectory.len(),
        report.horizon_steps,
        report.mode,
        report.aggregate_percent,
        report.metric
    );
    if !report.diverged.is_empty() {
        println!("diverged trajectories: {:?}", report.diverged);
    }
    if let Some(out) = &a.out {
        report.save(out)?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    if a.horizons.is_empty() {
        return Err(usage("--horizons is empty"));
    }
    let data = load_training_data(&a.data)?;
    let template = TrainConfig {
        batches: a.batches,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let rows = timing_benchmark(
        &data,
        &template,
        &a.horizons,
        a.probe_epochs,
        a.rounds,
        a.windows,
    )?;
    let csv = timing_csv(&rows);
    print!("{csv}");
    if let Some(out) = &a.out {
        write_out(out, &csv)?;
    }
    Ok(())
}

fn cmd_repro(a: ReproArgs) -> anyhow::Result<()> {
    for path in &a.configs {
        let cfg = ExperimentConfig::load(path)?;
        let out_dir = match (&a.out, &cfg.output_dir) {
            (Some(root), _) => root.join(&cfg.name),
            (None, Some(dir)) => dir.clone(),
            (None, None) => std::env::var_os(OUTPUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(&cfg.name),
        };
        log::info!("running '{}' into {}", cfg.name, out_dir.display());
        let summary = run_experiment(&cfg, &out_dir)
            .with_context(|| format!("experiment {}", path.display()))?;
        println!(
            "{}: {} ({} train / {} test trajectories)",
            summary.name,
            out_dir.display(),
            summary.train_trajectories,
            summary.test_trajectories
        );
        for run in &summary.runs {
            let error = run
                .test_error_percent
                .map(|e| format!("{e:.3}%"))
                .unwrap_or_else(|| "n/a".into());
            println!(
                "  {:<12} N = {:<3} test error {error}",
                run.method, run.horizon
            );
        }
        if let Some(rows) = &summary.bench {
            for row in rows {
                println!("  timing N = {:<3} slo/blo = {:.3}", row.horizon, row.ratio);
            }
        }
    }
    Ok(())
}

fn cmd_oracle(a: OracleArgs) -> anyhow::Result<()> {
    Model::parabolic_oracle(a.mu, a.lambda).save(&a.out)?;
    log::info!("wrote exact model to {}", a.out.display());
    Ok(())
}
