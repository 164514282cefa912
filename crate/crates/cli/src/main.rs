use std::process::ExitCode;

use clap::Parser;
use gvs_cli::{error_json, run_cli, Cli};

fn main() -> ExitCode {
    // verbosity only; science parameters come from config files
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GVS_LOG", "info")).init();
    let cli = Cli::parse();
    match run_cli(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::json!({ "status": "ok", "result": summary }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
