use std::process::ExitCode;

use clap::Parser;

use citi_cli::cli::{run, Cli};
use citi_core::CitiError;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let Some(CitiError::MissingPath(p)) = e.chain().find_map(|c| c.downcast_ref::<CitiError>()) {
                eprintln!("error: missing path {}", p.display());
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
