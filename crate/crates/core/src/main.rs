use std::io::Write;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;

use verbal_distill::cli::{run, Cli};
use verbal_distill::Error;

fn main() -> ExitCode {
    match try_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<Error>().map_or("io", Error::kind);
            eprintln!("error[{kind}]: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn try_main() -> anyhow::Result<()> {
    run(Cli::parse())?;
    std::io::stdout().flush().context("flushing stdout")?;
    Ok(())
}
