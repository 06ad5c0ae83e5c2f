//! Command-line front end: declarative JSON experiment configs in, CSV/JSON
//! artifacts and pass/fail verdicts out.
//!
//! The binary exposes four subcommands — `kernel`, `bridge`, `extremal`,
//! `verify` — that wrap the library pipelines. Every run writes its artifacts
//! into one output directory together with a `manifest.json` listing each
//! file with its SHA-256 digest, and every artifact embeds the fully resolved
//! configuration and seed. Nothing written depends on wall-clock time, so a
//! repeated run with the same config and seed reproduces every artifact byte
//! for byte.
//!
//! Exit-code contract (CI-friendly):
//!
//! * `0` — the command ran and every check passed,
//! * `1` — the command ran but a verification check failed,
//! * `2` — the config is unusable (missing file, parse error, inconsistent
//!   dimensions, missing sections),
//! * `3` — a numeric stage failed (solver divergence, singular covariance,
//!   trajectory blow-up).

pub mod artifacts;
pub mod commands;
pub mod config;

/// Version stamp embedded in every JSON artifact and expected at the top of
/// every config document.
pub const SCHEMA_VERSION: u32 = 1;

/// A failure with the exit code it maps to. Check failures are not errors:
/// commands report them through [`commands::Outcome::verdict`].
#[derive(Debug)]
pub enum CliError {
    /// The input cannot be used: parse failure, missing section, dimension
    /// mismatch, unknown preset. Exit code 2.
    Config(String),
    /// A computation failed after the config was accepted. Exit code 3.
    Numeric(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

/// Library errors surfacing after config validation are numeric failures.
impl From<hypobridge::Error> for CliError {
    fn from(err: hypobridge::Error) -> Self {
        CliError::Numeric(err.to_string())
    }
}
