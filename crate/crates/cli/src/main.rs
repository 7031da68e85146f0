use std::process::ExitCode;

use clap::Parser;
use musfill_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, musfill_cli::Command::Serve { .. }) { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();
    let json = cli.json;
    match run(cli) {
        Ok(Some(out)) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&out.json).expect("json output"));
            } else {
                println!("{}", out.human);
            }
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            // One line, whatever the error chain looks like.
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
