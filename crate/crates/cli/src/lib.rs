//! `molfield` command line: synthetic data, training, evaluation sweeps and
//! property checks. Every command prints one summary line and writes CSV
//! artifacts; identical arguments and seeds give byte-identical CSVs.

mod commands;
mod config;
mod data;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    chiral_gap, field_invariance, frame_equivariance, gradient_error, invariance_suite, InvarianceSummary, CHIRAL_MIN_GAP, DET_TOLERANCE, FIELD_TOLERANCE,
    FRAME_TOLERANCE, GRADCHECK_TOLERANCE,
};
pub use config::Settings;
pub use data::{geometry_targets, synth_molecules};

#[derive(Parser, Debug)]
#[command(name = "molfield", version, about = "SE(3)-invariant molecular fields")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub(crate) struct Global {
    /// Seed for every random stream
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 keeps runs bit-reproducible on any machine)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Model size: tiny, desk or paper
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Plain-text `key = value` file; flags override its entries
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic trajectory or molecule set as XYZ
    Synth(commands::SynthArgs),
    /// Train a model on one task
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a data file
    Eval(commands::EvalArgs),
    /// Dynamics metrics at chosen times
    Horizon(commands::HorizonArgs),
    /// Property error after deleting atoms from the inputs
    CorruptEval(commands::CorruptArgs),
    /// Retrain the property model on growing subsets of the data
    DataRatio(commands::DataRatioArgs),
    /// Correlate reconstruction loss with property error
    Correlate(commands::CorrelateArgs),
    /// Finite-difference check of every task loss
    Gradcheck(commands::GradcheckArgs),
    /// Frame equivariance, field invariance and chirality checks
    Invariance(commands::InvarianceArgs),
    /// Sample molecules from a generation checkpoint
    Generate(commands::GenerateArgs),
}

/// Runs one command; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<String> {
    let settings = Settings::load(cli.global.config.as_deref())?;
    let threads = settings.pick(cli.global.threads, "threads", 1usize)?;
    if threads == 0 {
        anyhow::bail!("--threads must be at least 1");
    }
    let ctx = commands::Context::new(&cli.global, settings)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(|| match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Horizon(a) => commands::horizon(&ctx, a),
        Command::CorruptEval(a) => commands::corrupt_eval(&ctx, a),
        Command::DataRatio(a) => commands::data_ratio(&ctx, a),
        Command::Correlate(a) => commands::correlate(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::Invariance(a) => commands::invariance(&ctx, a),
        Command::Generate(a) => commands::generate(&ctx, a),
    })
}
