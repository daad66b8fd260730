use std::process::ExitCode;

use clap::Parser;
use osnet::cli::{execute, Cli};
use osnet::Error;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_target(false).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Usage(e)) => e.exit(),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
