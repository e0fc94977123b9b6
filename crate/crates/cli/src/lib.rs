//! Command-line front end: argument parsing, config resolution, the
//! checkpoint bundle and one function per subcommand.

pub mod args;
pub mod bundle;
pub mod commands;
pub mod config;
pub mod error;

pub use args::{Cli, Command};
pub use error::{CliError, CliResult, ErrorReport};

/// Runs one parsed command.
pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Project(a) => commands::project(a),
        Command::Propagate(a) => commands::propagate(a),
        Command::Adapt(a) => commands::adapt(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::BenchSynth(a) => commands::bench_synth(a),
    }
}

/// Caps the global worker pool.
pub fn configure_threads(threads: Option<usize>) -> CliResult<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))
}
