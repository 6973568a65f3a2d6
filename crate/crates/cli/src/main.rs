use abuse_glm_cli::commands::{
    self, DescribeArgs, FeaturesArgs, FitArgs, FixtureArgs, RankArgs, ScenariosArgs, SimulateArgs,
    TwinsArgs,
};
use abuse_glm_cli::error::exit_code;
use abuse_glm_cli::pipeline::{self, PipelineArgs};
use clap::{Parser, Subcommand};

/// Poisson models of abuse counts across hosting providers.
#[derive(Parser)]
#[command(name = "abuse-glm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summary statistics of a provider table.
    Describe(DescribeArgs),
    /// Build the provider table from raw allocation, hosting and abuse files.
    Features(FeaturesArgs),
    /// Match seed providers to their nearest structural twins.
    Twins(TwinsArgs),
    /// Fit Poisson GLMs and render a side-by-side table.
    Fit(FitArgs),
    /// Dispersion, deviance and pseudo R² per model.
    Diagnostics(FitArgs),
    /// Partial effects of unit increments under fixed provider profiles.
    Scenarios(ScenariosArgs),
    /// Rank providers by Pearson residual under the fitted model.
    Rank(RankArgs),
    /// Monte Carlo study of dispersion under noisy size proxies.
    Simulate(SimulateArgs),
    /// Run every stage on a directory of raw inputs.
    Pipeline(PipelineArgs),
    /// Write a synthetic set of raw inputs.
    Fixture(FixtureArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Describe(a) => commands::cmd_describe(a),
        Command::Features(a) => commands::cmd_features(a),
        Command::Twins(a) => commands::cmd_twins(a),
        Command::Fit(a) => commands::cmd_fit(a),
        Command::Diagnostics(a) => commands::cmd_diagnostics(a),
        Command::Scenarios(a) => commands::cmd_scenarios(a),
        Command::Rank(a) => commands::cmd_rank(a),
        Command::Simulate(a) => commands::cmd_simulate(a),
        Command::Pipeline(a) => pipeline::cmd_pipeline(a),
        Command::Fixture(a) => commands::cmd_fixture(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
