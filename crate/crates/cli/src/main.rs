//! `fuzzreuse`: scan, seed, fuzz, store, screen, triage and report from one
//! binary.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fuzzreuse::crashdb::StoreError;
use fuzzreuse::fuzzing::FuzzError;
use fuzzreuse::inventory::InventoryError;
use fuzzreuse::report::ReportError;
use fuzzreuse::reuse::ReuseError;
use fuzzreuse::seedgen::{ProviderError, SeedGenError};
use fuzzreuse::triage::TriageError;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_ENV: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "fuzzreuse", version, about = "Fuzzing-campaign toolkit with crash reuse and triage")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Tool configuration file (JSON).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Crash store directory (overrides the config file).
    #[arg(long, global = true, value_name = "DIR")]
    pub store: Option<PathBuf>,
    /// Stats dump directory (overrides the config file).
    #[arg(long, global = true, value_name = "DIR")]
    pub dump_dir: Option<PathBuf>,
    /// Upper bound on worker threads and concurrent campaigns.
    #[arg(long, short = 'j', global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    /// More logging (repeat for debug output).
    #[arg(long, short = 'v', global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Find ELF targets under a firmware root and tabulate component versions.
    Scan(commands::ScanArgs),
    /// Generate a seed corpus for one applet.
    Seeds(commands::SeedsArgs),
    /// Run a batch of fuzzing campaigns and ingest their crashes.
    Fuzz(commands::FuzzArgs),
    /// Inspect or fill the crash store.
    #[command(subcommand)]
    Store(commands::StoreCommand),
    /// Replay stored crashes against a new target variant.
    Reuse(commands::ReuseArgs),
    /// Classify, deduplicate and minimize crashing inputs.
    Triage(commands::TriageArgs),
    /// Render comparison, overlap and inventory tables.
    #[command(subcommand)]
    Report(commands::ReportCommand),
    /// Build the bundled toy target.
    #[command(subcommand)]
    Toy(commands::ToyCommand),
}

/// Bad flags, bad configuration or missing inputs.
#[derive(Debug)]
pub struct UsageError(pub String);

/// Something the host is missing: fuzzer, emulator, sysroot, debugger.
#[derive(Debug)]
pub struct EnvError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for EnvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
impl std::error::Error for EnvError {}

pub fn usage_error(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn env_error(msg: impl Into<String>) -> anyhow::Error {
    EnvError(msg.into()).into()
}

fn provider_code(e: &ProviderError) -> u8 {
    match e {
        ProviderError::Config(_) => EXIT_USAGE,
        ProviderError::Transport(_) | ProviderError::Credentials(_) | ProviderError::BadResponse(_) => EXIT_ENV,
    }
}

fn fuzz_code(e: &FuzzError) -> u8 {
    match e {
        FuzzError::Config(_) | FuzzError::Io { .. } => EXIT_USAGE,
        FuzzError::Environment(_) | FuzzError::Spawn(_) => EXIT_ENV,
    }
}

fn store_code(e: &StoreError) -> u8 {
    match e {
        StoreError::Validation(_) | StoreError::UnknownRecord(_) => EXIT_USAGE,
        StoreError::Io { .. } => EXIT_ENV,
        StoreError::CorruptIndex { .. } | StoreError::BadBlob(_) | StoreError::AlreadySigned(_) => EXIT_INTERNAL,
    }
}

/// Exit code for an error, from the first recognised cause in its chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<EnvError>() {
            return EXIT_ENV;
        }
        if let Some(e) = cause.downcast_ref::<FuzzError>() {
            return fuzz_code(e);
        }
        if let Some(e) = cause.downcast_ref::<StoreError>() {
            return store_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ProviderError>() {
            return provider_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ReuseError>() {
            return match e {
                ReuseError::EmptyCrashSet | ReuseError::Invalid(_) => EXIT_USAGE,
                ReuseError::Environment(f) => fuzz_code(f),
                ReuseError::Store(s) => store_code(s),
            };
        }
        if let Some(e) = cause.downcast_ref::<SeedGenError>() {
            return match e {
                SeedGenError::InvalidArgument(_) | SeedGenError::Meta(_) => EXIT_USAGE,
                SeedGenError::Provider(p) => provider_code(p),
                SeedGenError::NoSeeds { .. } | SeedGenError::Io { .. } => EXIT_ENV,
            };
        }
        if let Some(e) = cause.downcast_ref::<ReportError>() {
            return match e {
                ReportError::UnsupportedFormat(_) | ReportError::Mismatch(..) => EXIT_USAGE,
                ReportError::Serialize(_) => EXIT_INTERNAL,
            };
        }
        if cause.is::<InventoryError>() || cause.is::<TriageError>() {
            return EXIT_USAGE;
        }
    }
    EXIT_INTERNAL
}

/// The cause chain on one line, skipping causes already spelled out by
/// their parent's message.
fn one_line(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string().replace('\n', " ");
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(cli.global.verbose);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("fuzzreuse: error: {}", one_line(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
