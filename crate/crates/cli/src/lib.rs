//! Command-line driver: dataset generation, training, search, evaluation,
//! verification suites and latent-trajectory dumps.
//!
//! Every command resolves its arguments (config file, then flags) into a
//! serialisable settings value, executes it and writes a manifest next to
//! its primary output. `verify reproduce` replays a manifest into a scratch
//! directory and compares content hashes.
//!
//! Exit codes: 0 success, 1 verification or runtime failure, 2 usage error.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub mod commands;
pub mod csvio;
pub mod manifest;
pub mod suites;

use manifest::{FileRecord, Manifest};

pub const ENV_OUT_DIR: &str = "LATENT_ROUTING_OUT_DIR";
pub const ENV_THREADS: &str = "LATENT_ROUTING_THREADS";

#[derive(Debug, Parser)]
#[command(name = "latent-routing", version, about = "Latent-space search for TSP and CVRP")]
pub struct Cli {
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, env = ENV_OUT_DIR, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads for per-instance parallelism (default: all cores).
    #[arg(long, global = true, env = ENV_THREADS)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a JSON-lines dataset of random instances.
    Gen(commands::gen::GenArgs),
    /// Train a model and write a checkpoint plus the epoch trace.
    Train(commands::train::TrainArgs),
    /// Run an inference method over a dataset.
    Solve(commands::solve::SolveArgs),
    /// Compare solve results against exact or supplied reference costs.
    Eval(commands::eval::EvalArgs),
    /// Run a named property suite.
    Verify(commands::verify::VerifyArgs),
    /// Dump the particle cloud of one run for 2-D plotting.
    TraceLatent(commands::trace_latent::TraceLatentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindArg {
    Tsp,
    Cvrp,
}

impl From<KindArg> for latent_routing::ProblemKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Tsp => latent_routing::ProblemKind::Tsp,
            KindArg::Cvrp => latent_routing::ProblemKind::Cvrp,
        }
    }
}

/// Shared inference flags; unset flags fall back to the config file, then
/// to the method defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct InferenceFlags {
    /// JSON file with inference settings (flags take precedence).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub proposal_var: Option<f64>,
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub sa_step0: Option<f64>,
    /// Comma-separated gaps between decoder updates.
    #[arg(long, value_delimiter = ',')]
    pub schedule: Option<Vec<usize>>,
    #[arg(long)]
    pub augment: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Failed(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "usage error: {e:#}"),
            CliError::Failed(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<latent_routing::Error> for CliError {
    fn from(e: latent_routing::Error) -> Self {
        use latent_routing::Error as E;
        match e {
            E::Argument(_) | E::Config(_) | E::Format(_) | E::Json(_) | E::Size { .. } => {
                CliError::Usage(e.into())
            }
            _ => CliError::Failed(e.into()),
        }
    }
}

/// I/O and parse problems are blamed on the invocation.
impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<latent_routing::Error>() {
            Ok(core) => core.into(),
            Err(e) => CliError::Usage(e),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(anyhow::anyhow!(msg.into()))
}

/// Execution environment shared by the commands.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub out_dir: PathBuf,
    pub threads: usize,
    pub argv: Vec<String>,
    pub quiet: bool,
}

impl Ctx {
    pub fn output(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    /// Runs `f` on a pool of `self.threads` workers.
    pub fn pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> CliResult<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| CliError::Failed(e.into()))?;
        Ok(pool.install(f))
    }

    /// Writes the manifest for a finished command next to `outputs[0]`.
    pub fn finish(
        &self,
        command: &str,
        config: &impl Serialize,
        seeds: serde_json::Value,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        started: Instant,
    ) -> CliResult<PathBuf> {
        let inputs = inputs
            .iter()
            .map(|p| manifest::record(p, None))
            .collect::<anyhow::Result<Vec<FileRecord>>>()?;
        let base = self.out_dir.canonicalize().ok();
        let outputs = outputs
            .iter()
            .map(|p| {
                let abs = p.canonicalize().unwrap_or_else(|_| p.clone());
                manifest::record(&abs, base.as_deref())
            })
            .collect::<anyhow::Result<Vec<FileRecord>>>()?;
        let m = Manifest {
            manifest_version: manifest::MANIFEST_VERSION,
            artifact_version: manifest::ARTIFACT_VERSION.to_string(),
            command: command.to_string(),
            argv: self.argv.clone(),
            config: serde_json::to_value(config).map_err(|e| CliError::Failed(e.into()))?,
            seeds,
            inputs,
            outputs,
            threads: self.threads,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        let primary = self.output(Path::new(&m.outputs[0].path));
        let path = manifest::path_for(&primary);
        m.write(&path)?;
        Ok(path)
    }

    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Absolute form of an input path, checked to exist.
pub fn input_path(p: &Path) -> CliResult<PathBuf> {
    p.canonicalize()
        .map_err(|e| usage(format!("input {}: {e}", p.display())))
}

/// Parses and runs a command line, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

pub fn execute(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    let threads = match cli.threads {
        Some(0) => return Err(usage("--threads must be >= 1")),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    std::fs::create_dir_all(&cli.out_dir)
        .map_err(|e| usage(format!("output directory {}: {e}", cli.out_dir.display())))?;
    let ctx = Ctx {
        out_dir: cli.out_dir,
        threads,
        argv,
        quiet: false,
    };
    match cli.command {
        Command::Gen(a) => commands::gen::run(&ctx, a),
        Command::Train(a) => commands::train::run(&ctx, a),
        Command::Solve(a) => commands::solve::run(&ctx, a),
        Command::Eval(a) => commands::eval::run(&ctx, a),
        Command::Verify(a) => commands::verify::run(&ctx, a),
        Command::TraceLatent(a) => commands::trace_latent::run(&ctx, a),
    }
}
