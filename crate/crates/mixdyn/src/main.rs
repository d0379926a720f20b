//! mixdyn: command-line interface to the lognormal-mixture local-volatility
//! model. Subcommands cover closed-form pricing, smile calibration, SDE
//! simulation, diffusion-coefficient inspection, the verification suites,
//! conditional future smiles, and the reference-grid reproduction run.
//!
//! Exit codes: 0 pass, 1 tolerance failure, 2 input error.

mod commands;
mod util;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mixdyn", version, about = "Lognormal-mixture local-volatility model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form call prices and implied vols across strikes.
    Price(commands::PriceArgs),
    /// Fit mixture weights and vols to an implied-vol quote file.
    Calibrate(commands::CalibrateArgs),
    /// Simulate the mixture-tracking SDE or the scenario model.
    Simulate(commands::SimulateArgs),
    /// Evaluate diffusion coefficients on a (t, y) grid.
    Localvol(commands::LocalvolArgs),
    /// Run verification suites and emit a JSON report.
    Verify(commands::VerifyArgs),
    /// Conditional future smiles V(t, t + tenor, K) by engine.
    #[command(name = "forward-smile")]
    ForwardSmile(commands::ForwardSmileArgs),
    /// Recompute the embedded conditional-smile reference grid and compare.
    #[command(name = "reproduce-table2")]
    ReproduceTable2(commands::ReproduceArgs),
}

fn dispatch(cli: &Cli) -> anyhow::Result<i32> {
    match &cli.command {
        Command::Price(args) => commands::run_price(args),
        Command::Calibrate(args) => commands::run_calibrate(args),
        Command::Simulate(args) => commands::run_simulate(args),
        Command::Localvol(args) => commands::run_localvol(args),
        Command::Verify(args) => commands::run_verify(args),
        Command::ForwardSmile(args) => commands::run_forward_smile(args),
        Command::ReproduceTable2(args) => commands::run_reproduce(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
