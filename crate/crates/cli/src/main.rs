use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hidden_drift::harness::config::{Config, Overrides};
use hidden_drift::harness::scenario::Scenario;
use hidden_drift::harness::table::Format;
use hidden_drift::harness::{run_command, Command};

#[derive(Parser)]
#[command(name = "hidden-drift", version, about = "Portfolio selection with an unobserved drift")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Simulate a path bundle and check the martingale property of returns.
    Simulate(Common),
    /// Run the configured drift filter and export its trace.
    Filter(Common),
    /// Trade the configured strategy and report expected utility and replication errors.
    Optimize(Common),
    /// Replicate the optimal claim through the embedded PDE.
    Replicate(Common),
    /// Check the configured identities by Monte Carlo.
    Verify(Common),
    /// Estimate the order of convergence in the time step.
    Converge(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct Common {
    /// TOML scenario file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    paths: Option<usize>,
    /// Directory for the report and artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Encoding of tabular artifacts.
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

fn split(sub: Sub) -> (Command, Common) {
    match sub {
        Sub::Simulate(c) => (Command::Simulate, c),
        Sub::Filter(c) => (Command::Filter, c),
        Sub::Optimize(c) => (Command::Optimize, c),
        Sub::Replicate(c) => (Command::Replicate, c),
        Sub::Verify(c) => (Command::Verify, c),
        Sub::Converge(c) => (Command::Converge, c),
    }
}

fn run(command: Command, args: Common) -> hidden_drift::Result<bool> {
    let config = Config::load(&args.config)?.with_overrides(Overrides {
        seed: args.seed,
        dt: args.dt,
        paths: args.paths,
    });
    let scenario = Scenario::new(config)?;
    let format = match args.format {
        FormatArg::Csv => Format::Csv,
        FormatArg::Json => Format::Json,
    };
    let report = run_command(command, &scenario, args.out.as_deref(), format)?;
    for c in &report.checks {
        eprintln!(
            "{} {}: lhs={:.6e} rhs={:.6e} ({})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.lhs,
            c.rhs,
            c.detail
        );
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = split(cli.command);
    match run(command, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
