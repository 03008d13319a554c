mod commands;
mod output;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emap_core::io::RunConfig;
use emap_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "emap",
    version,
    about = "Self-interpretable classifiers from equivalency maps"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// INI run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream (overrides [experiment] seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for data generation and evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise the tumor dataset.
    GenData,
    /// Train the black-box CNN with BCE.
    TrainBlackbox(DataArg),
    /// Distil an interpretable network from a trained black box.
    Distill(commands::DistillArgs),
    /// Train an interpretable network end to end from random weights.
    DirectTrain(DataArg),
    /// Evaluate a checkpoint on the test split.
    Eval(commands::EvalArgs),
    /// Export E-maps of selected test images.
    EmapExport(commands::ExportArgs),
    /// Run one of the studies.
    #[command(subcommand)]
    Experiment(commands::Experiment),
    /// Summarise the metrics of finished runs.
    Report(commands::ReportArgs),
}

#[derive(Args, Debug)]
pub struct DataArg {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
}

fn run(cli: Cli) -> emap_core::Result<()> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(g.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    match cli.command {
        Command::GenData => commands::gen_data(g, &cfg),
        Command::TrainBlackbox(a) => commands::train_blackbox(g, &cfg, &a.data),
        Command::Distill(a) => commands::distill(g, &cfg, &a),
        Command::DirectTrain(a) => commands::direct_train(g, &cfg, &a.data),
        Command::Eval(a) => commands::eval(g, &cfg, &a),
        Command::EmapExport(a) => commands::emap_export(g, &cfg, &a),
        Command::Experiment(e) => commands::experiment(g, &cfg, &e),
        Command::Report(a) => commands::report(g, &cfg, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format(|buf, record| writeln!(buf, "{} {}", record.level().as_str().to_lowercase(), record.args()))
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
