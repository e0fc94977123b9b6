use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use realign_cli::{configure_threads, run, Cli, CliError};

fn fail(err: &CliError) -> ExitCode {
    let report = serde_json::to_string(&err.report()).expect("error report serializes");
    eprintln!("{report}");
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => return fail(&CliError::Usage(e.render().to_string().trim_end().to_string())),
    };

    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();

    match configure_threads(cli.threads).and_then(|()| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
