use std::process::ExitCode;

use anyhow::Context;
use boundary_probe::cli::{parse, run_cli, Command};
use boundary_probe::Error;

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os()) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let what = match &cli.command {
        Command::GenWorld(_) => "gen-world",
        Command::Train(_) => "train",
        Command::Probe(_) => "probe",
        Command::Report(_) => "report",
    };
    match run_cli(&cli).with_context(|| format!("{what} failed")) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(3, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
