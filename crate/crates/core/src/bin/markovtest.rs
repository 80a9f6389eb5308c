//! Command-line interface: run the Markov property test and order selection
//! on CSV data, simulate the built-in models, run the replication bench, and
//! deseasonalize series.
//!
//! Logs go to stderr; machine-readable output goes to stdout or `--output`.
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use markovtest::bench::{run_bench, BenchSpec};
use markovtest::engine::{estimate_order, run_test, StatVariant, TestConfig};
use markovtest::error::Error;
use markovtest::rngutil::substream;
use markovtest::series::{deseason, TimeSeries};
use markovtest::sim::{paper_model, simulate, SimModel, DEFAULT_BURN_IN};

#[derive(Parser)]
#[command(name = "markovtest", version, about = "Markov property testing for time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test whether the series is Markov of order k.
    Test(TestArgs),
    /// Sequentially test k = 1, 2, ... and report the first non-rejection.
    Order(OrderArgs),
    /// Simulate one of the built-in models to CSV.
    Simulate(SimArgs),
    /// Replication study: rejection fractions over simulated paths.
    Bench(BenchArgs),
    /// Subtract per-phase means with the given period.
    Deseason(DeseasonArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Number of data chunks.
    #[arg(long = "L")]
    l: Option<usize>,
    /// Number of random frequency pairs.
    #[arg(long = "B")]
    b: Option<usize>,
    /// Monte Carlo samples per conditioning point.
    #[arg(long = "M")]
    m: Option<usize>,
    /// Largest lag.
    #[arg(long = "Q")]
    q: Option<usize>,
    /// Fixed mixture size (skips cross-validation).
    #[arg(long = "G")]
    g: Option<usize>,
    #[arg(long)]
    n_boot: Option<usize>,
    #[arg(long, value_enum, default_value_t = VariantArg::Dr)]
    variant: VariantArg,
    /// Comma-separated column indices to test (0-based).
    #[arg(long, value_delimiter = ',')]
    test_dims: Option<Vec<usize>>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Full-scale settings (B=1000, M=100) instead of desk-scale defaults.
    #[arg(long, default_value_t = false)]
    paper_scale: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Dr,
    Plugin,
}

impl ConfigArgs {
    /// Build a TestConfig. `desk` applies the scaled-down bench defaults
    /// (B=200, M=50, n_boot=1000, G grid {1,2,3}) unless --paper-scale.
    fn to_config(&self, desk: bool) -> TestConfig {
        let mut cfg = TestConfig::default();
        if desk && !self.paper_scale {
            cfg.freq_pairs = 200;
            cfg.mc_samples = 50;
            cfg.n_boot = 1000;
            cfg.g_grid = vec![1, 2, 3];
        }
        cfg.seed = self.seed;
        cfg.alpha = self.alpha;
        if let Some(v) = self.l {
            cfg.chunks = v;
        }
        if let Some(v) = self.b {
            cfg.freq_pairs = v;
        }
        if let Some(v) = self.m {
            cfg.mc_samples = v;
        }
        if let Some(v) = self.q {
            cfg.max_lag = v;
        }
        cfg.mixture_size = self.g;
        if let Some(v) = self.n_boot {
            cfg.n_boot = v;
        }
        cfg.variant = match self.variant {
            VariantArg::Dr => StatVariant::DoublyRobust,
            VariantArg::Plugin => StatVariant::Plugin,
        };
        cfg.test_dims = self.test_dims.clone();
        cfg
    }
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Markov order under test (embedding size).
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct OrderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Largest order to try.
    #[arg(long, default_value_t = 5)]
    k_max: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SimArgs {
    /// Built-in model: 1 (VAR), 2 (threshold VAR), 3 (ARCH).
    #[arg(long)]
    model: u8,
    /// Series length after burn-in.
    #[arg(long = "T")]
    t_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_BURN_IN)]
    burn_in: usize,
    /// Read the noise parameter 0.5 as a variance instead of a standard
    /// deviation.
    #[arg(long, default_value_t = false)]
    noise_variance: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Built-in model: 1 (VAR), 2 (threshold VAR), 3 (ARCH).
    #[arg(long)]
    model: u8,
    /// Comma-separated series lengths.
    #[arg(long = "T", value_delimiter = ',', default_value = "500")]
    t_list: Vec<usize>,
    /// Comma-separated orders to test.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    k: Vec<usize>,
    /// Replications per (T, k) cell.
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = DEFAULT_BURN_IN)]
    burn_in: usize,
    #[arg(long, default_value_t = false)]
    noise_variance: bool,
    /// Output path stem; writes <stem>.csv and <stem>.json.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct DeseasonArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    period: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Csv(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn emit(text: &str, output: Option<&PathBuf>) -> Result<(), Error> {
    match output {
        Some(path) => std::fs::write(path, text).map_err(Error::from),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn set_workers(workers: Option<usize>) {
    if let Some(w) = workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("warning: could not set worker count: {e}");
        }
    }
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::Test(args) => {
            set_workers(args.config.workers);
            let series = TimeSeries::from_csv_path(&args.input)?;
            let config = args.config.to_config(false);
            let report = run_test(&series, args.k, &config)?;
            emit(&serde_json::to_string_pretty(&report).expect("report serializes"), args.output.as_ref())
        }
        Command::Order(args) => {
            set_workers(args.config.workers);
            let series = TimeSeries::from_csv_path(&args.input)?;
            let config = args.config.to_config(false);
            let report = estimate_order(&series, &config, args.k_max)?;
            emit(&serde_json::to_string_pretty(&report).expect("report serializes"), args.output.as_ref())
        }
        Command::Simulate(args) => {
            let model = paper_model(args.model, args.noise_variance)?;
            let mut rng = substream(args.seed, "simulate", &[]);
            let series = simulate(&model, args.t_len, args.burn_in, &mut rng)?;
            let mut buf = Vec::new();
            series.to_csv_writer(&mut buf)?;
            emit(
                std::str::from_utf8(&buf).expect("CSV is UTF-8").trim_end(),
                args.output.as_ref(),
            )
        }
        Command::Bench(args) => {
            let model = paper_model(args.model, args.noise_variance)?;
            let workers = args.config.workers.unwrap_or_else(num_cpus);
            let spec = BenchSpec {
                model: model.clone(),
                model_label: model_label(args.model, &model),
                k_range: args.k.clone(),
                t_list: args.t_list.clone(),
                replications: args.reps,
                workers,
                burn_in: args.burn_in,
                config: args.config.to_config(true),
            };
            let table = run_bench(&spec)?;
            match args.output.as_ref() {
                Some(stem) => {
                    std::fs::write(stem.with_extension("csv"), table.to_csv())?;
                    std::fs::write(
                        stem.with_extension("json"),
                        serde_json::to_string_pretty(&table).expect("table serializes"),
                    )?;
                }
                None => print!("{}", table.to_csv()),
            }
            if table.failure_excessive() {
                return Err(Error::Internal(format!(
                    "{} of {} replications failed",
                    table.total_failures(),
                    table.total_replications()
                )));
            }
            Ok(())
        }
        Command::Deseason(args) => {
            let series = TimeSeries::from_csv_path(&args.input)?;
            let out = deseason(&series, args.period)?;
            let mut buf = Vec::new();
            out.to_csv_writer(&mut buf)?;
            emit(
                std::str::from_utf8(&buf).expect("CSV is UTF-8").trim_end(),
                args.output.as_ref(),
            )
        }
    }
}

fn model_label(id: u8, model: &SimModel) -> String {
    let kind = match model {
        SimModel::Var3 { .. } => "var",
        SimModel::Threshold3 { .. } => "threshold",
        SimModel::Arch3 { .. } => "arch",
        SimModel::Ar1 { .. } => "ar1",
        SimModel::IidNoise { .. } => "noise",
    };
    format!("model{id}-{kind}")
}

fn num_cpus() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
