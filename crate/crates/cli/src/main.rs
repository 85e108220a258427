use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dynrec_core::experiments::{bound_report, load_config_file, resolve_config, run_experiment, ExperimentKind, Preset};
use dynrec_core::recovery::BoundMode;
use dynrec_core::Error;

#[derive(Parser)]
#[command(name = "dynrec", version, about = "Sparse recovery of quadratic dynamical systems from under-sampled bursts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Success probability versus number of bursts (Lorenz 96).
    PhaseTransition(Common),
    /// First-component coefficients of the Fisher lattice for several γ.
    FisherTable(Common),
    /// Minimum number of bursts per localization window width.
    Localization(Common),
    /// Identification from one long chaotic trajectory.
    SingleTrajectory(Common),
    /// Recovery error and support hits versus state noise.
    NoiseSweep(Common),
    /// L-BP, least squares and STLS on identical data.
    Compare(Common),
    /// Number of bursts prescribed by the recovery bound.
    Bound(BoundArgs),
}

#[derive(Args)]
struct Common {
    /// JSON configuration merged over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Theoretical,
    Effective,
}

#[derive(Args)]
struct BoundArgs {
    /// Sparsity.
    #[arg(long)]
    s: usize,
    /// Number of dictionary columns (or the window width for localized runs).
    #[arg(long)]
    n_columns: usize,
    /// Failure probability.
    #[arg(long, default_value_t = 0.5)]
    eps: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Effective)]
    mode: ModeArg,
    /// Bound constant.
    #[arg(long, default_value_t = 3.2)]
    c: f64,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidSystem(_) | Error::Json(_) => 2,
            _ => 1,
        }
    }
}

fn run_common(kind: ExperimentKind, args: &Common) -> Result<(), Error> {
    let file = args.config.as_deref().map(load_config_file).transpose()?;
    let preset = match args.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    };
    let cfg = resolve_config(kind, preset, file.as_ref(), args.seed)?;
    if args.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let report = run_experiment(kind, &cfg)?;
    match &args.out {
        Some(path) => report.write_csv_file(path)?,
        None => print!("{}", report.to_csv_string()?),
    }
    for line in &report.summary {
        eprintln!("{line}");
    }
    eprintln!(
        "{kind}: {} rows, seed {}, {:.2}s",
        report.rows.len(),
        report.seed,
        report.wall_time.as_secs_f64()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let (kind, common) = match &cli.command {
        Command::PhaseTransition(c) => (ExperimentKind::PhaseTransition, c),
        Command::FisherTable(c) => (ExperimentKind::FisherTable, c),
        Command::Localization(c) => (ExperimentKind::Localization, c),
        Command::SingleTrajectory(c) => (ExperimentKind::SingleTrajectory, c),
        Command::NoiseSweep(c) => (ExperimentKind::NoiseSweep, c),
        Command::Compare(c) => (ExperimentKind::Compare, c),
        Command::Bound(b) => {
            let mode = match b.mode {
                ModeArg::Theoretical => BoundMode::Theoretical,
                ModeArg::Effective => BoundMode::Effective,
            };
            let k = bound_report(b.s, b.n_columns, b.eps, mode, b.c)?;
            println!("{k}");
            return Ok(());
        }
    };
    run_common(kind, common)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
