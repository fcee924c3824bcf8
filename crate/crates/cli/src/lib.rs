//! The `cxr` operator command line.
//!
//! One binary covers training, compression, serving, the edge daemon, link
//! simulation, report generation, saliency overlays and the model registry.
//! Human-readable output goes to stdout; `--json` switches every command to
//! a single JSON document. Exit status is 0 on success, 2 for usage errors
//! (including missing input files) and 1 for any other failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;

pub mod args;
pub mod model;
mod ops;
mod report;
pub mod sim;

pub use args::{Cli, Command};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }

    fn failed(e: impl std::fmt::Display) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::failed(e)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// An input path that must exist; a missing one is a usage error.
fn input(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("missing input: {}", path.display())))
    }
}

/// `dir/stem.ext` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn emit_json(out: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(value).map_err(CliError::failed)?)?;
    Ok(())
}

/// Parse `argv` and run the command, writing results to `out` and
/// diagnostics to stderr. Returns the process exit status.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // --help and --version land here too, with exit code 0
            let code = e.exit_code();
            if e.use_stderr() {
                let _ = e.print();
            } else {
                let _ = write!(out, "{}", e.render());
            }
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("cxr: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train(a) => model::train(cli, a, out),
        Command::Compress(a) => model::compress(cli, a, out),
        Command::Heatmap(a) => model::heatmap(cli, a, out),
        Command::Report(a) => report::run(cli, a, out),
        Command::Simulate(a) => sim::run(cli, a, out),
        Command::Serve(a) => ops::serve(cli, a, out),
        Command::Client(a) => ops::client(cli, a, out),
        Command::Registry(a) => ops::registry(cli, a, out),
    }
}
