use std::io::Write;
use std::process::ExitCode;

use bmtas_cli::{io::log, run, Cli};
use clap::Parser;
use serde_json::json;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(out.as_bytes()).and_then(|_| stdout.flush()).is_err() {
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            log("error", "command_failed", json!({"error": e.to_string(), "exit_code": e.exit_code()}));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
