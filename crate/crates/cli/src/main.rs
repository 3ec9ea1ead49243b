//! `cellgate`: validate bundles, compile tables, select policies for a task,
//! run the enforcing proxy, benchmark selection and replay attack traces.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid input or rejected task,
//! 3 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::FileConfig;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Invalid(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Invalid(m) | Failure::Runtime(m) => m,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cellgate", version, about = "Least-privilege sandboxing for browser-using agents")]
pub struct Cli {
    /// trace, debug, info, warn or error (or a tracing filter directive).
    #[arg(long, global = true, env = "CELLGATE_LOG")]
    log_level: Option<String>,
    /// Append logs to this file instead of stderr.
    #[arg(long, global = true, env = "CELLGATE_LOG_FILE")]
    log_file: Option<PathBuf>,
    /// TOML file with defaults for any option not given otherwise.
    #[arg(long, global = true, env = "CELLGATE_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Parse and cross-check sitemaps, policy sets and composites.
    Validate(ValidateArgs),
    /// Compile one composite into its authorization table.
    Compile(CompileArgs),
    /// Pick policies for a task and confirm them.
    Select(SelectArgs),
    /// Run the enforcing proxy.
    Serve(ServeArgs),
    /// Score policy selection over a labelled task set.
    Bench(BenchArgs),
    /// Replay a request trace and compare verdicts.
    Replay(ReplayArgs),
    /// Write a fresh CA certificate and key for TLS interception.
    GenCa(GenCaArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// A domain directory, or a directory of domain directories.
    #[arg(long, env = "CELLGATE_BUNDLE_DIR")]
    pub bundle_dir: Option<PathBuf>,
    /// Composite documents to check against the bundles.
    #[arg(long)]
    pub composite: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    #[arg(long, env = "CELLGATE_BUNDLE_DIR")]
    pub bundle_dir: Option<PathBuf>,
    #[arg(long)]
    pub composite: PathBuf,
    /// Print the whole table as JSON.
    #[arg(long)]
    pub dump: bool,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub task: String,
    /// Identifier used to look up stub answers.
    #[arg(long)]
    pub task_id: Option<String>,
    /// Canned provider answers (JSON); without it the remote provider
    /// configured through CELLGATE_PROVIDER_* is used.
    #[arg(long, env = "CELLGATE_STUB")]
    pub stub: Option<PathBuf>,
    #[arg(long, env = "CELLGATE_BUNDLE_DIR", conflicts_with = "well_known_base")]
    pub bundle_dir: Option<PathBuf>,
    /// Fetch bundles from `<base>/.well-known/`; `{domain}` is substituted.
    #[arg(long, env = "CELLGATE_WELL_KNOWN_BASE")]
    pub well_known_base: Option<String>,
    /// Accept the selection without prompting.
    #[arg(long)]
    pub yes: bool,
    /// Directory for `<domain>.json` composites; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_domain_knowledge: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "CELLGATE_LISTEN")]
    pub listen: Option<String>,
    #[arg(long, env = "CELLGATE_BUNDLE_DIR")]
    pub bundle_dir: Option<PathBuf>,
    /// Composites to load into the session at startup.
    #[arg(long)]
    pub composite: Vec<PathBuf>,
    /// strict or observe.
    #[arg(long, env = "CELLGATE_MODE")]
    pub mode: Option<String>,
    /// CA certificate (PEM) for TLS interception.
    #[arg(long, env = "CELLGATE_CA", requires = "ca_key")]
    pub ca: Option<PathBuf>,
    #[arg(long, env = "CELLGATE_CA_KEY", requires = "ca")]
    pub ca_key: Option<PathBuf>,
    /// Control API token; a random one is printed when absent.
    #[arg(long, env = "CELLGATE_TOKEN")]
    pub token: Option<String>,
    /// Append enforcement records here as JSON lines.
    #[arg(long, env = "CELLGATE_AUDIT_LOG")]
    pub audit_log: Option<PathBuf>,
    #[arg(long)]
    pub session: Option<String>,
    /// `host=ip:port`, or `*=ip:port` for every host.
    #[arg(long, value_name = "HOST=ADDR")]
    pub upstream_override: Vec<String>,
    /// Hold condition checks until DOM reports for the previous action arrive.
    #[arg(long)]
    pub lockout: bool,
    #[arg(long)]
    pub settle_timeout_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON-lines task set.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, env = "CELLGATE_STUB", conflicts_with = "echo")]
    pub stub: Option<PathBuf>,
    /// Answer every task with its own labels.
    #[arg(long)]
    pub echo: bool,
    #[arg(long, env = "CELLGATE_BUNDLE_DIR", conflicts_with = "well_known_base")]
    pub bundle_dir: Option<PathBuf>,
    #[arg(long, env = "CELLGATE_WELL_KNOWN_BASE")]
    pub well_known_base: Option<String>,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    pub json: bool,
    #[arg(long, default_value_t = 4)]
    pub jobs: usize,
    #[arg(long)]
    pub no_domain_knowledge: bool,
    /// Also list failing tasks with their failure class.
    #[arg(long)]
    pub failures: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, env = "CELLGATE_BUNDLE_DIR")]
    pub bundle_dir: Option<PathBuf>,
    #[arg(long)]
    pub composite: Vec<PathBuf>,
    /// Run with allow-all composites in observe mode instead.
    #[arg(long, conflicts_with = "proxy")]
    pub baseline: bool,
    /// Replay against a running proxy rather than a private one.
    #[arg(long)]
    pub proxy: Option<std::net::SocketAddr>,
    #[arg(long, env = "CELLGATE_TOKEN", requires = "proxy")]
    pub token: Option<String>,
    #[arg(long, default_value = "default")]
    pub session: String,
}

#[derive(Debug, Args)]
pub struct GenCaArgs {
    #[arg(long)]
    pub cert: PathBuf,
    #[arg(long)]
    pub key: PathBuf,
}

fn init_logging(level: &str, file: Option<&PathBuf>) -> Result<(), Failure> {
    let filter = tracing_subscriber::EnvFilter::try_new(level)
        .map_err(|e| Failure::Usage(format!("bad --log-level `{level}`: {e}")))?;
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_target(false);
    match file {
        Some(path) => {
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            builder.with_ansi(false).with_writer(std::sync::Mutex::new(f)).init();
        }
        None => builder.with_writer(std::io::stderr).init(),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(Failure::Usage)?,
        None => FileConfig::default(),
    };
    let level = cli.log_level.clone().or(file.log_level.clone()).unwrap_or_else(|| "warn".into());
    init_logging(&level, cli.log_file.as_ref().or(file.log_file.as_ref()))?;
    match cli.cmd {
        Cmd::Validate(a) => commands::validate(a, &file),
        Cmd::Compile(a) => commands::compile(a, &file),
        Cmd::Select(a) => commands::select(a, &file),
        Cmd::Serve(a) => commands::serve(a, &file),
        Cmd::Bench(a) => commands::bench(a, &file),
        Cmd::Replay(a) => commands::replay(a, &file),
        Cmd::GenCa(a) => commands::gen_ca(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("cellgate: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
