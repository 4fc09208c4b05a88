mod commands;
mod dump;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use resmatch::Error;

use commands::Cli;

/// Process exit status for each error class.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Parse { .. } | Error::Weights { .. } => 2,
        Error::NonFinite(_) => 4,
        Error::Config(_) | Error::Usage(_) | Error::Shape { .. } | Error::TensorShape { .. } => 3,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("RESMATCH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("RESMATCH_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(3),
            };
        }
    };
    match init_threads().and_then(|_| commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
