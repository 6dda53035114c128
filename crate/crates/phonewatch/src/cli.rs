//! The `phonewatch` command line: `run`, `evaluate`, `benchmark`, `serve`.
//!
//! Exit codes: 0 ok, 1 config or store setup error, 2 input error (including
//! frames that failed mid-run), 3 cannot bind, 64 usage.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};

use crate::config::{ConfigError, EngineConfig};
use crate::evalkit::{self, BenchmarkOptions, ReportTable, Variant};
use crate::frames::{DirectorySource, FrameSource};
use crate::pipeline::{OnFrameError, PipelineMode};
use crate::server::{self, ApiConfig};
use crate::store::{Store, ViolationLogger};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_BIND: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "phonewatch", version, about = "Detect, log and review drivers using phones")]
pub struct Cli {
    /// Print the effective configuration (file plus overrides) as TOML and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Process a frame directory and log violations to the store.
    Run(RunArgs),
    /// Score predictions against ground truth (11-point interpolated AP).
    Evaluate(EvaluateArgs),
    /// Compare pipeline throughput across variants.
    Benchmark(BenchmarkArgs),
    /// Serve the review API, optionally with a live pipeline attached.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Single,
    Two,
}

impl From<ModeArg> for PipelineMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Single => PipelineMode::SingleStep,
            ModeArg::Two => PipelineMode::TwoStep,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory of frames named by zero-padded index.
    #[arg(long)]
    pub input: PathBuf,
    /// Overrides the configured pipeline mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not in (0, 1]"))
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Ground truth JSONL.
    #[arg(long)]
    pub gt: PathBuf,
    /// Predictions JSONL.
    #[arg(long)]
    pub pred: PathBuf,
    /// IoU thresholds, comma separated.
    #[arg(long, value_delimiter = ',', default_values = ["0.5", "0.1"], value_parser = unit_interval)]
    pub iou: Vec<f64>,
    /// Ground truth on driver-side crops, reported as extra columns.
    #[arg(long, requires = "pred_cropped")]
    pub gt_cropped: Option<PathBuf>,
    #[arg(long, requires = "gt_cropped")]
    pub pred_cropped: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Detection,
    Tracking,
    TwoStep,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Detection => Variant::Detection,
            VariantArg::Tracking => Variant::Tracking,
            VariantArg::TwoStep => Variant::TwoStep,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Variants to run (repeatable); all three by default.
    #[arg(long, value_enum)]
    pub variant: Vec<VariantArg>,
    #[arg(long)]
    pub json: bool,
    /// Time the pipeline only, not frame decoding.
    #[arg(long)]
    pub exclude_decode: bool,
    /// Runs per variant; the fastest is reported.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=1000))]
    pub repeat: u32,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `server.bind`.
    #[arg(long)]
    pub bind: Option<String>,
    /// Overrides `server.attach_input`: a frame directory to process live.
    #[arg(long)]
    pub attach: Option<PathBuf>,
    /// Overrides the configured pipeline mode of the attached pipeline.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(EXIT_CONFIG, e.to_string())
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("phonewatch: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(a) => {
            let config = load(&a.config, a.mode)?;
            if cli.print_config {
                return print_config(&config);
            }
            run(&config, &a.input)
        }
        Command::Evaluate(a) => {
            if cli.print_config {
                return Err(Failure::new(EXIT_USAGE, "evaluate takes no config file"));
            }
            evaluate(&a)
        }
        Command::Benchmark(a) => {
            let config = load(&a.config, None)?;
            if cli.print_config {
                return print_config(&config);
            }
            benchmark(&config, &a)
        }
        Command::Serve(a) => {
            let mut config = load(&a.config, a.mode)?;
            if let Some(bind) = &a.bind {
                config.server.bind = bind.clone();
            }
            if let Some(dir) = &a.attach {
                config.server.attach_input = Some(dir.clone());
            }
            config.validate()?;
            if cli.print_config {
                return print_config(&config);
            }
            serve(config)
        }
    }
}

fn load(path: &Path, mode: Option<ModeArg>) -> Result<EngineConfig, Failure> {
    let mut config = EngineConfig::load(path)?;
    if let Some(m) = mode {
        config.pipeline.mode = m.into();
        config.validate_mode(config.pipeline.mode)?;
    }
    Ok(config)
}

fn print_config(config: &EngineConfig) -> Result<(), Failure> {
    print!("{}", config.to_toml());
    Ok(())
}

fn open_input(dir: &Path, config: &EngineConfig) -> Result<DirectorySource, Failure> {
    if !dir.is_dir() {
        return Err(Failure::new(
            EXIT_INPUT,
            format!("input {} is not a frame directory", dir.display()),
        ));
    }
    DirectorySource::open(dir, config.source.timestamps.clone()).map_err(|e| Failure::new(EXIT_INPUT, e.to_string()))
}

fn open_store(config: &EngineConfig) -> Result<Store, Failure> {
    Store::open(&config.store.dir).map_err(|e| Failure::new(EXIT_CONFIG, format!("opening store: {e}")))
}

/// A pipeline with its tracker resumed past the stream's persisted ids, and
/// the logger feeding the store.
fn logged_pipeline(
    config: &EngineConfig,
    store: &Store,
) -> Result<(crate::pipeline::Pipeline, ViolationLogger), Failure> {
    let mode = config.pipeline.mode;
    let mut pipeline = config.build_pipeline(mode, true)?;
    let logger = ViolationLogger::new(store.clone(), &config.stream_id, mode, config.store.snapshot_policy)
        .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    if let (Some(last), Some(tracker)) = (logger.resume_point(), pipeline.tracker_mut()) {
        tracker.resume_after(last);
    }
    Ok((pipeline, logger))
}

fn run(config: &EngineConfig, input: &Path) -> Result<(), Failure> {
    let source = open_input(input, config)?;
    let store = open_store(config)?;
    let (mut pipeline, mut logger) = logged_pipeline(config, &store)?;
    let summary = pipeline.run_stream(source, &mut [&mut logger], OnFrameError::Skip);
    let flushed = store.flush();
    let stats = logger.stats();
    println!(
        "frames: {}, failed: {}, FPS: {:.2}",
        summary.frames,
        summary.failed,
        summary.mean_fps()
    );
    println!("violations: {}, vehicles: {}", stats.violations_created, stats.vehicles);
    let _ = std::io::stdout().flush();
    if let Err(e) = flushed {
        return Err(Failure::new(EXIT_CONFIG, format!("flushing store: {e}")));
    }
    if let Some(e) = logger.take_error() {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("{} store error(s), first: {e}", stats.store_errors),
        ));
    }
    if summary.failed > 0 {
        return Err(Failure::new(EXIT_INPUT, format!("{} frame(s) failed", summary.failed)));
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let input = |e: evalkit::EvalFileError| Failure::new(EXIT_INPUT, e.to_string());
    let run = |gt: &Path, pred: &Path| {
        let (gt, pred) = evalkit::load_pair(gt, pred).map_err(input)?;
        evalkit::evaluate(&pred, &gt, &a.iou).map_err(|e| Failure::new(EXIT_INPUT, e.to_string()))
    };
    let full = run(&a.gt, &a.pred)?;
    let cropped = match (&a.gt_cropped, &a.pred_cropped) {
        (Some(g), Some(p)) => Some(run(g, p)?),
        _ => None,
    };
    let table = ReportTable {
        thresholds: a.iou.clone(),
        full,
        cropped,
    };
    if a.json {
        println!("{}", table.to_json());
    } else {
        print!("{}", table.render());
    }
    Ok(())
}

fn benchmark(config: &EngineConfig, a: &BenchmarkArgs) -> Result<(), Failure> {
    open_input(&a.input, config)?;
    let variants: Vec<Variant> = if a.variant.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variant.iter().map(|&v| v.into()).collect()
    };
    let options = BenchmarkOptions {
        exclude_decode: a.exclude_decode,
        repeats: a.repeat as usize,
    };
    let mut results = Vec::new();
    for v in variants {
        let r = evalkit::benchmark(
            v,
            options,
            |v| config.build_pipeline(v.mode(), v.tracking()).map_err(Failure::from),
            || open_input(&a.input, config).map(|s| Box::new(s) as Box<dyn FrameSource>),
        )?;
        results.push(r);
    }
    if a.json {
        println!("{}", evalkit::benchmarks_json(&results));
    } else {
        print!("{}", evalkit::render_benchmarks(&results));
    }
    match results.iter().find(|r| !r.valid) {
        Some(r) => Err(Failure::new(
            EXIT_INPUT,
            format!(
                "{} run failed: {}",
                r.variant.describe(),
                r.error.as_deref().unwrap_or("unknown error")
            ),
        )),
        None => Ok(()),
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        if let Err(e) = tokio::signal::ctrl_c().await {
            warn!("cannot listen for ctrl-c: {e}");
            std::future::pending::<()>().await;
        }
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(e) => {
                warn!("cannot listen for SIGTERM: {e}");
                std::future::pending::<()>().await;
            }
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    info!("shutting down");
}

fn serve(config: EngineConfig) -> Result<(), Failure> {
    let store = open_store(&config)?;
    let addr: SocketAddr = config.server.bind_addr()?;
    let listener = std::net::TcpListener::bind(addr)
        .map_err(|e| Failure::new(EXIT_BIND, format!("cannot bind {addr}: {e}")))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| Failure::new(EXIT_BIND, e.to_string()))?;

    let stop = Arc::new(AtomicBool::new(false));
    let worker = match &config.server.attach_input {
        Some(dir) => {
            let source = open_input(dir, &config)?;
            let (mut pipeline, mut logger) = logged_pipeline(&config, &store)?;
            let stop = stop.clone();
            Some(std::thread::spawn(move || {
                let source = source.take_while(move |_| !stop.load(Ordering::Relaxed));
                let summary = pipeline.run_stream(source, &mut [&mut logger], OnFrameError::Skip);
                let s = logger.stats();
                info!(
                    "attached pipeline done: {} frames ({} failed), {} violations, {} vehicles",
                    summary.frames, summary.failed, s.violations_created, s.vehicles
                );
            }))
        }
        None => None,
    };

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("starting runtime: {e}")))?;
    let api = ApiConfig {
        token: config.server.token.clone(),
        cors_allow: config.server.cors_allow.clone(),
    };
    let served = runtime.block_on(async {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        println!("listening on http://{}", listener.local_addr()?);
        let _ = std::io::stdout().flush();
        server::serve(listener, server::router(store.clone(), &api), shutdown_signal()).await
    });

    stop.store(true, Ordering::Relaxed);
    if let Some(w) = worker {
        if w.join().is_err() {
            error!("attached pipeline panicked");
        }
    }
    let flushed = store.flush();
    if store.pending_snapshots() > 0 {
        warn!("{} snapshot(s) still pending after flush", store.pending_snapshots());
    }
    served.map_err(|e| Failure::new(EXIT_CONFIG, format!("server: {e}")))?;
    flushed.map_err(|e| Failure::new(EXIT_CONFIG, format!("flushing store: {e}")))
}
