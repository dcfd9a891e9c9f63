//! `sinkhorn-em`: fit mixtures, check the population theory, and run or
//! replay the benchmark experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn, LevelFilter};
use sinkhorn_em::experiments::{self, run_experiment, write_outputs, ExperimentConfig, RunKey, Scenario};
use sinkhorn_em::metrics::{match_to_truth, EXACT_MAX_ATOMS};
use sinkhorn_em::theory::{run_battery, BatteryOptions};
use sinkhorn_em::{
    accuracy, fit, mse, w2_squared_entropic, w2_squared_exact, CovarianceMode, Dataset, DiscreteMixture, Engine,
    EngineConfig, MeanTying, MixtureModel, PopulationSpec, SinkhornSettings,
};

#[derive(Parser)]
#[command(name = "sinkhorn-em", version, about = "Sinkhorn EM, vanilla EM and overparameterized EM for Gaussian mixtures")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a mixture to a data file and write the trace.
    Fit(FitArgs),
    /// Run the population property battery.
    TheoryCheck(TheoryArgs),
    /// Run a benchmark experiment.
    Experiment(ExperimentArgs),
    /// Rerun one row of a finished experiment and compare its trace hash.
    Replay(ReplayArgs),
    /// Compare an estimated mixture with the truth.
    Metrics(MetricsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Vem,
    Oem,
    Sem,
}

impl From<EngineArg> for Engine {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Vem => Engine::Vanilla,
            EngineArg::Oem => Engine::Overparameterized,
            EngineArg::Sem => Engine::Sinkhorn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CovarianceArg {
    Fixed,
    Full,
    Shared,
}

#[derive(Args)]
struct FitArgs {
    /// Initial model (JSON with weights, means, covariances).
    #[arg(long)]
    model: PathBuf,
    /// Data points, one per CSV row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "sem")]
    engine: EngineArg,
    #[arg(long, value_enum, default_value = "fixed")]
    covariance: CovarianceArg,
    /// Tie two one-dimensional means as θ and -θ.
    #[arg(long)]
    antipodal: bool,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    /// Stop once no parameter moves more than this in one step.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    budget_seconds: Option<f64>,
    /// Row/column normalization sweeps per E-step.
    #[arg(long, default_value_t = 200)]
    sinkhorn_iterations: usize,
    /// Early stop for the inner solver (0 runs every sweep).
    #[arg(long, default_value_t = 0.0)]
    sinkhorn_tolerance: f64,
    #[arg(long)]
    warm_start: bool,
    /// Recorded in the trace header.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "fit_out")]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 1.0)]
    theta_star: f64,
    #[arg(long, default_value_t = 0.7)]
    alpha_star: f64,
    /// Step of the θ grid on [-3, 3].
    #[arg(long, default_value_t = 0.05)]
    grid_step: f64,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Scenario name; required unless the config names one.
    #[arg(long)]
    scenario: Option<String>,
    /// TOML or JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to these engines (repeatable).
    #[arg(long, value_enum)]
    engine: Vec<EngineArg>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Segmentation wall-clock budget per run.
    #[arg(long)]
    budget_seconds: Option<f64>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Output directory of the original experiment.
    #[arg(long)]
    from: PathBuf,
    /// Run key as printed in the runs CSV, e.g. `asymmetric_two/sem/3.4/d0/v0`.
    #[arg(long)]
    key: String,
    /// Write the replayed trace CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Estimated model (JSON).
    #[arg(long)]
    estimate: PathBuf,
    /// True model (JSON).
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    reg: f64,
    #[arg(long, default_value_t = 500)]
    entropic_iterations: usize,
    /// Accuracy radius on the first three coordinates.
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    /// Pair centers by optimal assignment instead of by index.
    #[arg(long)]
    assign: bool,
}

enum Failure {
    Input(String),
    Degenerate(String),
}

impl From<sinkhorn_em::Error> for Failure {
    fn from(e: sinkhorn_em::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<MixtureModel<f64>, Failure> {
    MixtureModel::from_json(&read(path)?).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn cmd_fit(args: FitArgs) -> CmdResult {
    let model = load_model(&args.model)?;
    let file = fs::File::open(&args.data).map_err(|e| Failure::Input(format!("{}: {e}", args.data.display())))?;
    let data = Dataset::read_csv(file).map_err(|e| Failure::Input(format!("{}: {e}", args.data.display())))?;
    let mut config = EngineConfig::new(args.engine.into())
        .with_iterations(args.iterations)
        .with_covariance(match args.covariance {
            CovarianceArg::Fixed => CovarianceMode::Fixed,
            CovarianceArg::Full => CovarianceMode::Full,
            CovarianceArg::Shared => CovarianceMode::Shared,
        })
        .with_sinkhorn(SinkhornSettings {
            max_iterations: args.sinkhorn_iterations,
            marginal_tolerance: args.sinkhorn_tolerance,
            warm_start: args.warm_start,
        });
    if args.antipodal {
        config = config.with_tying(MeanTying::Antipodal);
    }
    config.parameter_tolerance = args.tolerance;
    config.time_budget_seconds = args.budget_seconds;

    let trace = fit(&model, &data, &config)?;
    create_dir(&args.out)?;
    let mut csv = Vec::new();
    trace.write_csv(&mut csv, true)?;
    write(&args.out.join("trace.csv"), &String::from_utf8_lossy(&csv))?;
    write(&args.out.join("trace.json"), &trace.header_json(&config, args.seed))?;
    write(&args.out.join("model.json"), &trace.final_model().to_json())?;
    info!("{} iterations, termination {:?}", trace.len(), trace.termination);
    println!("{}", args.out.join("trace.csv").display());
    if trace.termination.is_degenerate() {
        return Err(Failure::Degenerate(format!("fit ended early: {:?}", trace.termination)));
    }
    Ok(())
}

fn cmd_theory(args: TheoryArgs) -> CmdResult {
    let spec = PopulationSpec::new(args.theta_star, args.alpha_star)?;
    let opts = BatteryOptions { grid_step: args.grid_step, tolerance: args.tolerance, iterations: args.iterations };
    let report = run_battery(&spec, &opts)?;
    print!("{}", report.to_text());
    if let Some(path) = &args.out {
        write(path, &report.to_json())?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Input("property battery failed".into()))
    }
}

fn cmd_experiment(args: ExperimentArgs) -> CmdResult {
    let mut config = match (&args.config, &args.scenario) {
        (Some(path), _) => ExperimentConfig::parse(&read(path)?)?,
        (None, Some(_)) => ExperimentConfig::default(),
        (None, None) => return Err(Failure::Input("either --scenario or --config is required".into())),
    };
    if let Some(name) = &args.scenario {
        config.scenario = Scenario::parse(name)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if !args.engine.is_empty() {
        config.engines = args.engine.iter().map(|&e| e.into()).collect();
    }
    if let Some(b) = args.budget_seconds {
        config.segmentation.budget_seconds = Some(b);
    }
    if let Some(out) = args.out {
        config.output_dir = Some(out);
    }
    config.validate()?;
    let dir = config.output_dir.clone().unwrap_or_else(|| PathBuf::from("results"));
    info!("running {} ({} runs)", config.scenario.name(), experiments::run_keys(&config)?.len());
    let result = run_experiment(&config, args.jobs)?;
    let files = write_outputs(&result, &dir)?;
    for path in [Some(&files.runs), Some(&files.summary), Some(&files.metadata), files.maps.as_ref(), files.curves.as_ref()]
        .into_iter()
        .flatten()
    {
        println!("{}", path.display());
    }
    let degenerate = result.rows.iter().filter(|r| r.termination.starts_with("degenerate")).count();
    if degenerate > 0 {
        warn!("{degenerate} runs ended with a degenerate cluster");
    }
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> CmdResult {
    let key: RunKey = args.key.parse()?;
    let scenario = key.scenario.name();
    let meta_path = args.from.join(format!("{scenario}_metadata.json"));
    let meta: serde_json::Value =
        serde_json::from_str(&read(&meta_path)?).map_err(|e| Failure::Input(format!("{}: {e}", meta_path.display())))?;
    let config = ExperimentConfig::parse(&meta["config"].to_string())?;

    let runs_path = args.from.join(format!("{scenario}_runs.csv"));
    let mut reader = csv::Reader::from_path(&runs_path).map_err(|e| Failure::Input(format!("{}: {e}", runs_path.display())))?;
    let headers = reader.headers().map_err(|e| Failure::Input(e.to_string()))?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let (key_col, hash_col) = match (column("key"), column("trace_hash")) {
        (Some(k), Some(h)) => (k, h),
        _ => return Err(Failure::Input(format!("{}: missing key or trace_hash column", runs_path.display()))),
    };
    let mut expected = None;
    for record in reader.records() {
        let record = record.map_err(|e| Failure::Input(e.to_string()))?;
        if record.get(key_col) == Some(args.key.as_str()) {
            expected = record.get(hash_col).map(str::to_string);
        }
    }
    let expected = expected.ok_or_else(|| Failure::Input(format!("key {} not found in {}", args.key, runs_path.display())))?;

    let output = experiments::replay(&config, &key)?;
    let actual = output.trace.hash();
    if let Some(path) = &args.out {
        let mut csv = Vec::new();
        output.trace.write_csv(&mut csv, false)?;
        write(path, &String::from_utf8_lossy(&csv))?;
    }
    println!("{actual}");
    if actual != expected {
        return Err(Failure::Input(format!("trace hash mismatch: expected {expected}, got {actual}")));
    }
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> CmdResult {
    let estimate = load_model(&args.estimate)?;
    let truth = load_model(&args.truth)?;
    let (a, b) = (DiscreteMixture::from_model(&truth), DiscreteMixture::from_model(&estimate));
    let exact = if a.len().max(b.len()) <= EXACT_MAX_ATOMS { Some(w2_squared_exact(&a, &b)?) } else { None };
    let entropic = w2_squared_entropic(&a, &b, args.reg, args.entropic_iterations)?;
    let centers = if args.assign {
        match_to_truth(estimate.means(), truth.means())?
    } else {
        estimate.means().to_owned()
    };
    let report = serde_json::json!({
        "w2_squared_exact": exact,
        "w2_squared_entropic": entropic,
        "accuracy": accuracy(centers.view(), truth.means(), args.radius)?,
        "mse": mse(centers.view(), truth.means())?,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("plain data serializes"));
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors exit with 1; 2 is reserved for degenerate runs.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet {
        LevelFilter::Error
    } else {
        [LevelFilter::Warn, LevelFilter::Info, LevelFilter::Debug][usize::from(cli.verbose).min(2)]
    };
    env_logger::Builder::new().filter_level(level).init();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::TheoryCheck(a) => cmd_theory(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Metrics(a) => cmd_metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Degenerate(msg)) => {
            eprintln!("degenerate: {msg}");
            ExitCode::from(2)
        }
    }
}
