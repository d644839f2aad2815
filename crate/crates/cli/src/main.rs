use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use nhl_cli::args::Cli;
use nhl_cli::{error_kind, run, RunConfig};
use serde_json::json;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    let (experiment, common, flags) = cli.command.request();
    let result = RunConfig::resolve(experiment, common.config.as_deref(), &common.set, &flags)
        .map_err(|e| ("config", e))
        .and_then(|cfg| run(&cfg).map_err(|e| (error_kind(&e), e)));
    match result {
        Ok(report) => {
            println!("{}", json!({ "experiment": experiment.tag(), "out": report.dir, "summary": report.summary }));
            ExitCode::SUCCESS
        }
        Err((kind, e)) => {
            eprintln!("{}", json!({ "error": kind, "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
