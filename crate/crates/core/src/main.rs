use std::process::ExitCode;

use clap::Parser;
use range_attack::cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(status) if status.per_image_errors == 0 => ExitCode::SUCCESS,
        Ok(status) => {
            eprintln!("{} image(s) failed with errors", status.per_image_errors);
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
