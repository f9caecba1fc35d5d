use std::process::ExitCode;

use clap::Parser;
use listnar::cli::{self, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error in {}: {e}", cli.command.name());
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
