#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use clipstream::fec::FecMode;
use clipstream::harness::{emit_report, run_matrix, ExperimentConfig, HarnessError, ReportFormat, TraceSource};
use clipstream::media::{generate_trace, write_trace_csv, GeneratorParams};
use clipstream::netem::LinkConfig;
use clipstream::ProtocolMode;

#[derive(Parser)]
#[command(
    name = "clipstream",
    version,
    about = "Partially reliable video streaming experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the protocol x loss matrix and write a report.
    Run(RunArgs),
    /// Write a synthetic frame trace as CSV to standard output.
    GenTrace(GenArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Gnuplot,
}

#[derive(Clone, Copy, ValueEnum)]
enum Parity {
    Static,
    Adaptive,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Comma separated: tcp, quic, cs, csfec.
    #[arg(long, value_delimiter = ',', default_value = "tcp,quic,cs,csfec")]
    modes: Vec<ProtocolMode>,
    /// Loss rates in percent, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,0.08,0.16,0.32,0.64,1.28,2.56,5.12")]
    loss: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    reps: u32,
    #[arg(long, default_value_t = 20.0)]
    rate_mbps: f64,
    #[arg(long, default_value_t = 15.0)]
    delay_ms: f64,
    #[arg(long, default_value_t = 1000)]
    buffer_pkts: usize,
    /// `synthetic` or a path to a frame trace CSV.
    #[arg(long, default_value = "synthetic")]
    trace: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Parity::Static)]
    fec: Parity,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, default_value_t = 296.21)]
    duration: f64,
    #[arg(long, default_value_t = 24.0)]
    fps: f64,
    #[arg(long, default_value_t = 176.0)]
    total_mb: f64,
    /// Exact frame count; derived from duration and fps otherwise.
    #[arg(long)]
    frames: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::Link(_) | HarnessError::Media(_) | HarnessError::Io(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn experiment(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    if !(args.rate_mbps > 0.0) || !args.delay_ms.is_finite() || args.delay_ms < 0.0 {
        return Err(Failure::Config("rate must be positive and delay non-negative".into()));
    }
    let trace = match args.trace.as_str() {
        "synthetic" => TraceSource::default(),
        path => TraceSource::Csv(PathBuf::from(path)),
    };
    let mut cfg = ExperimentConfig {
        modes: args.modes.clone(),
        loss_rates: args.loss.iter().map(|p| p / 100.0).collect(),
        repetitions: args.reps,
        link: LinkConfig {
            rate_bps: (args.rate_mbps * 1e6).round() as u64,
            one_way_delay: Duration::from_secs_f64(args.delay_ms / 1e3),
            buffer_capacity: args.buffer_pkts,
            ..LinkConfig::default()
        },
        trace,
        base_seed: args.seed,
        ..ExperimentConfig::default()
    };
    cfg.options.fec_mode = match args.fec {
        Parity::Static => FecMode::Static,
        Parity::Adaptive => FecMode::Adaptive,
    };
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let cfg = experiment(&args)?;
    info!(
        "{} modes x {} loss rates x {} reps",
        cfg.modes.len(),
        cfg.loss_rates.len(),
        cfg.repetitions
    );
    let report = run_matrix(&cfg)?;
    let format = match args.format {
        Format::Csv => ReportFormat::Csv,
        Format::Json => ReportFormat::Json,
        Format::Gnuplot => ReportFormat::Gnuplot,
    };
    let text = emit_report(&report, format)?;
    let io = |e: std::io::Error| Failure::Runtime(e.to_string());
    match &args.out {
        Some(path) => std::fs::write(path, text).map_err(io),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(io),
    }
}

fn gen_trace(args: GenArgs) -> Result<(), Failure> {
    let defaults = GeneratorParams::default();
    let frame_count = match args.frames {
        Some(n) => Some(n),
        None if args.duration == defaults.duration_s && args.fps == defaults.fps => defaults.frame_count,
        None => None,
    };
    let params = GeneratorParams {
        duration_s: args.duration,
        fps: args.fps,
        total_bytes: (args.total_mb * 1e6).round() as u64,
        frame_count,
        seed: args.seed,
        ..defaults
    };
    let trace = generate_trace(&params).map_err(|e| Failure::Config(e.to_string()))?;
    std::io::stdout()
        .write_all(write_trace_csv(&trace).as_bytes())
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CLIPSTREAM_LOG", "error")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::GenTrace(a) => gen_trace(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("clipstream: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("clipstream: {msg}");
            ExitCode::FAILURE
        }
    }
}
