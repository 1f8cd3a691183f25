use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod run;

use run::Status;

/// Implied interventions for instrumental variables.
#[derive(Parser)]
#[command(name = "implied", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a discrete structural model.
    Simulate(commands::simulate::Args),
    /// TMLE and plug-in estimates of the mean outcome under an instrument policy.
    Tmle(commands::tmle::Args),
    /// Monte Carlo replication of the estimator table.
    #[command(name = "replicate-table1")]
    ReplicateTable1(commands::replicate::Args),
    /// EM-HAL projection of a treatment target in Kullback-Leibler divergence.
    KlProject(commands::kl::Args),
    /// Least-squares projection onto the attainable treatment marginals.
    LsProject(commands::ls::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate::run(a),
        Command::Tmle(a) => commands::tmle::run(a),
        Command::ReplicateTable1(a) => commands::replicate::run(a),
        Command::KlProject(a) => commands::kl::run(a),
        Command::LsProject(a) => commands::ls::run(a),
    };
    match result {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => {
            eprintln!("warning: the solver stopped before reaching its tolerance; results were written with converged = false");
            ExitCode::from(run::EXIT_NON_CONVERGENCE)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(run::exit_code(&e))
        }
    }
}
