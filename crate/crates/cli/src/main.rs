use std::io::Write;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use trialign_cli::{run, Cli};
use trialign_core::retrieval::ServiceError;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TRIALIGN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = ServiceError::new("usage", e.to_string().trim_end());
            emit(&serde_json::to_string(&err).unwrap());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(Some(out)) => {
            emit(&serde_json::to_string_pretty(&out).unwrap());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}: {}", e.code, e.message);
            emit(&serde_json::to_string(&e).unwrap());
            ExitCode::FAILURE
        }
    }
}

/// Writes one line to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}
