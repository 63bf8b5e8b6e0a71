use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pipret_cli::config::{CommandName, Params, RunConfig};
use pipret_cli::dispatch::execute;
use pipret_cli::error::CliError;
use pipret_cli::report::write_atomic;

/// Private inner-product retrieval: capacity bounds, the table's Markov
/// chain, a retrieval simulator, and Gram-only learning.
#[derive(Parser)]
#[command(name = "pipret", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Invocation {
    /// JSON run configuration; flags given here override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    params: Params,
}

#[derive(Subcommand)]
enum Command {
    /// Converse and achievable inverse rates over a parameter grid
    Capacity(Invocation),
    /// Second eigenvalue and irreducibility of the table's chain
    Spectrum(Invocation),
    /// Distance to uniform as the file length grows
    Converge(Invocation),
    /// Run a retrieval scheme on random requests and measure its rate
    Simulate(Invocation),
    /// Check that server queries do not depend on the request
    Audit(Invocation),
    /// SVM, regression or PCA from a Gram matrix
    #[command(name = "ml-demo")]
    MlDemo(Invocation),
    /// Run every acceptance criterion and write a verdict
    #[command(name = "reproduce_all")]
    ReproduceAll(Invocation),
    /// Execute a configuration file as is
    Run { config: PathBuf },
}

fn resolve(cmd: Command) -> Result<RunConfig, CliError> {
    let (name, inv) = match cmd {
        Command::Run { config } => return RunConfig::load(&config),
        Command::Capacity(i) => (CommandName::Capacity, i),
        Command::Spectrum(i) => (CommandName::Spectrum, i),
        Command::Converge(i) => (CommandName::Converge, i),
        Command::Simulate(i) => (CommandName::Simulate, i),
        Command::Audit(i) => (CommandName::Audit, i),
        Command::MlDemo(i) => (CommandName::MlDemo, i),
        Command::ReproduceAll(i) => (CommandName::ReproduceAll, i),
    };
    let file = inv.config.as_deref().map(RunConfig::load).transpose()?;
    RunConfig::resolve(name, file, inv.params)
}

fn init_pool() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("PIPRET_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("PIPRET_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(CliError::validation)
}

fn run(cli: Cli) -> Result<Option<String>, CliError> {
    init_pool()?;
    let cfg = resolve(cli.command)?;
    let outcome = execute(&cfg)?;
    match &outcome.output {
        Some(path) => write_atomic(path, outcome.text.as_bytes())?,
        None => print!("{}", outcome.text),
    }
    Ok(outcome.failure)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let err = match run(cli) {
        Ok(None) => return ExitCode::SUCCESS,
        Ok(Some(failure)) => CliError::Acceptance(failure),
        Err(e) => e,
    };
    eprintln!("pipret: {err}");
    ExitCode::from(err.exit_code() as u8)
}
