use std::process::ExitCode;

use clap::Parser;
use preimage_cli::{execute, summary, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(outcomes) => {
            for o in &outcomes {
                println!("{}", summary(o));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
