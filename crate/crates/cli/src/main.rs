//! Command-line driver: loads a plain-text experiment configuration,
//! dispatches to the named task, and persists CSV payloads plus JSON
//! summaries with provenance hashes.

mod report;
mod tasks;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dporo::config::TaskKind;

#[derive(Parser)]
#[command(
    name = "dporo",
    version,
    about = "Homogenization experiments for periodic lattice energies with stiff and soft bonds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lattice geometry analysis
    Lattice {
        #[command(subcommand)]
        cmd: LatticeCmd,
    },
    /// Cell problems: interaction density, homogenized densities, islands
    Cell {
        #[command(subcommand)]
        cmd: CellCmd,
    },
    /// Effective-functional experiments
    Gamma {
        #[command(subcommand)]
        cmd: GammaCmd,
    },
    /// Gradient flows and their comparison
    Flow {
        #[command(subcommand)]
        cmd: FlowCmd,
    },
    /// Summarize result records in a directory
    Report { dir: PathBuf },
}

#[derive(Subcommand)]
enum LatticeCmd {
    /// Phase report: components, winding generators, islands
    Analyze(RunArgs),
}

#[derive(Subcommand)]
enum CellCmd {
    /// Interaction density over a sample grid and cell sizes
    Phi(RunArgs),
    /// Homogenized densities of the hard phases
    Fhom(RunArgs),
    /// Island minima and the aggregate constant
    Islands(RunArgs),
}

#[derive(Subcommand)]
enum GammaCmd {
    /// Convergence of lattice minima to the effective minimum
    Check(RunArgs),
}

#[derive(Subcommand)]
enum FlowCmd {
    /// Lattice minimizing movement
    Micro(RunArgs),
    /// Effective coupled flow
    Macro(RunArgs),
    /// Two-scale comparison of the flows
    Compare(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment configuration file
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's output block)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweep points
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Solver tolerance override
    #[arg(long)]
    tol: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Lattice {
            cmd: LatticeCmd::Analyze(args),
        } => tasks::run(TaskKind::Analyze, &args_to_run(args)),
        Command::Cell { cmd } => match cmd {
            CellCmd::Phi(args) => tasks::run(TaskKind::Phi, &args_to_run(args)),
            CellCmd::Fhom(args) => tasks::run(TaskKind::FHom, &args_to_run(args)),
            CellCmd::Islands(args) => tasks::run(TaskKind::Islands, &args_to_run(args)),
        },
        Command::Gamma {
            cmd: GammaCmd::Check(args),
        } => tasks::run(TaskKind::GammaCheck, &args_to_run(args)),
        Command::Flow { cmd } => match cmd {
            FlowCmd::Micro(args) => tasks::run(TaskKind::FlowMicro, &args_to_run(args)),
            FlowCmd::Macro(args) => tasks::run(TaskKind::FlowMacro, &args_to_run(args)),
            FlowCmd::Compare(args) => tasks::run(TaskKind::FlowCompare, &args_to_run(args)),
        },
        Command::Report { dir } => report::report(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn args_to_run(args: RunArgs) -> tasks::RunOptions {
    tasks::RunOptions {
        config: args.config,
        out: args.out,
        workers: args.workers.max(1),
        tol: args.tol,
    }
}
