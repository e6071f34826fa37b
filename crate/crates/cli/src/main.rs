use std::process::ExitCode;

use clap::Parser;
use ctxprune_cli::fail::{error_line, Fail, Kind};
use ctxprune_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            let err = anyhow::Error::new(Fail::new(Kind::Usage, first));
            eprintln!("{}", error_line(&err));
            return ExitCode::from(Kind::Usage.code());
        }
    };
    match run(cli) {
        Ok(out) => {
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(ctxprune_cli::fail::classify(&e).code())
        }
    }
}
