use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdgmm_cli::{cmd_diagnose, cmd_estimate, cmd_simulate, CliError, Report, RunConfig};

#[derive(Parser)]
#[command(
    name = "mdgmm",
    version,
    about = "Grouped two-stage policy estimation: MD, one-step GMM and simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the JSON report instead of the text table.
    #[arg(long)]
    json_only: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the second stage on unit data.
    Estimate(Common),
    /// Run a Monte Carlo study on a synthetic scenario.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Dump replication 0 as CSV files into this directory.
        #[arg(long)]
        export_data: Option<PathBuf>,
    },
    /// First-stage selection, conditioning and bias-bound diagnostics.
    Diagnose(Common),
}

fn emit(report: &Report, common: &Common) -> Result<(), CliError> {
    let json = report
        .to_json()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    if let Some(path) = &common.out {
        std::fs::write(path, format!("{json}\n")).map_err(|e| CliError::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    let mut stdout = std::io::stdout().lock();
    let text = if common.json_only {
        format!("{json}\n")
    } else {
        report.to_text()
    };
    // a closed pipe is not a failure of the run
    let _ = stdout.write_all(text.as_bytes());
    Ok(())
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Estimate(common) => emit(&cmd_estimate(load(common)?)?, common),
        Command::Diagnose(common) => emit(&cmd_diagnose(load(common)?)?, common),
        Command::Simulate {
            common,
            export_data,
        } => emit(
            &cmd_simulate(load(common)?, export_data.as_deref().map(Path::new))?,
            common,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    panic::set_hook(Box::new(|info| eprintln!("internal error: {info}")));
    let code = match panic::catch_unwind(AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => 3,
    };
    ExitCode::from(code as u8)
}
