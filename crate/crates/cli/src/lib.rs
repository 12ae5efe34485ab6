//! The `descry` command line: argument parsing, configuration resolution and
//! subcommand dispatch.

pub mod config;
pub mod run;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use config::{resolve, ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "descry", version, about = "Dense visual descriptors from synthetic correspondences")]
pub struct Cli {
    /// JSON run configuration
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.epochs=5` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs everything on the calling thread
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Output directory
    #[arg(long, global = true, env = "DESCRY_OUT", value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Print the effective configuration and exit
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural dataset (into `data.dir` unless `--out` is given)
    GenScenes,
    /// Train an encoder; writes checkpoint.dscr and metrics.csv
    Train,
    /// Keypoint tracking errors on a dataset split
    Eval,
    /// Error curves under rotation, scale and tilt
    Invariance,
    /// Preference heatmaps and grasp candidates for a keypoint database
    Heatmap,
    /// HTTP API for annotation and inspection
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "DESCRY_LISTEN")]
    pub listen: Option<SocketAddr>,
    #[arg(long, env = "DESCRY_IMAGE_DIR", value_name = "DIR")]
    pub image_dir: Option<PathBuf>,
    #[arg(long, env = "DESCRY_CHECKPOINT", value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "DESCRY_DB_DIR", value_name = "DIR")]
    pub db_dir: Option<PathBuf>,
    #[arg(long, env = "DESCRY_STATIC_DIR", value_name = "DIR")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    /// bad invocation or configuration
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Usage(_) => ExitCode::from(1),
            Failure::Runtime(_) => ExitCode::from(2),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<descry::Error> for Failure {
    fn from(e: descry::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

/// Resolves the effective configuration for an invocation.
pub fn effective_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let text = match &cli.config {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut config = resolve(text.as_deref(), &cli.sets, cli.seed)?;
    if let Command::Serve(a) = &cli.command {
        let s = &mut config.serve;
        if let Some(v) = a.listen {
            s.listen = v;
        }
        if let Some(v) = &a.image_dir {
            s.image_dir = v.clone();
        }
        if let Some(v) = &a.db_dir {
            s.db_dir = v.clone();
        }
        if let Some(v) = &a.static_dir {
            s.static_dir = Some(v.clone());
        }
        if let Some(v) = &a.checkpoint {
            config.encoder.checkpoint = Some(v.clone());
        }
    }
    Ok(config)
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    let config = effective_config(cli)?;
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&config).expect("config serializes"));
        return Ok(());
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match &cli.command {
        Command::GenScenes => {
            let dir = cli.out.clone().unwrap_or_else(|| config.data.dir.clone());
            run::gen_scenes(&config, &dir)
        }
        Command::Train => run::train(&config, &out),
        Command::Eval => run::eval(&config, &out),
        Command::Invariance => run::invariance(&config, &out),
        Command::Heatmap => run::heatmap(&config, &out),
        Command::Serve(_) => run::serve(&config),
    }
}

/// Parses arguments, runs, and maps the outcome to the process exit status.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
