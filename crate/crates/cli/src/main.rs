mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::{Classify, Failure};

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().internal()?;
    }
    let (report, format, out) = match &cli.command {
        Command::Inspect(a) => (commands::inspect(a)?, a.output.format, a.output.out.as_ref()),
        Command::Classify(a) => (commands::classify_cmd(a)?, a.output.format, a.output.out.as_ref()),
        Command::Synth(a) => (commands::synth(a)?, a.output.format, a.output.out.as_ref()),
        Command::Merge(a) => (commands::merge(a)?, a.format, a.report.as_ref()),
        Command::CompareDelta(a) => (commands::compare_delta(a)?, a.output.format, a.output.out.as_ref()),
        Command::DepthTrend(a) => (commands::depth_trend(a)?, a.output.format, a.output.out.as_ref()),
        Command::ToyAdapt(a) => (commands::toy_adapt(a)?, a.output.format, a.output.out.as_ref()),
        Command::Hist(a) => (commands::hist(a)?, a.output.format, a.output.out.as_ref()),
    };
    report.emit(format, out).internal()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code as u8)
        }
    }
}
