use std::process::ExitCode;

use attrmogen_cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            if !outcome.summary.ends_with('\n') {
                println!();
            }
            println!("output: {}", outcome.out.display());
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(2)
        }
    }
}
