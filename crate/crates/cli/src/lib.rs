//! Library side of the `flowmatch` command-line tool: run configuration,
//! checkpoint format, subcommands and oracle self-checks.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod oracle;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "FLOWMATCH_THREADS";

/// Sizes the global worker pool from `FLOWMATCH_THREADS` if set.
pub fn init_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| CliError::Argument(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Argument(e.to_string()))
}
