//! `voxelcast` — dataset generation, splatting, reference rendering and
//! neural rendering for colored-voxel desk scenes.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use voxelcast_cli::commands::{
    self, EditArgs, EvalArgs, GenDatasetArgs, Globals, InferArgs, OracleArgs, SceneArgs,
    TrainArgs,
};
use voxelcast_cli::config::ConfigMap;
use voxelcast_cli::PipelineError;

#[derive(Parser)]
#[command(
    name = "voxelcast",
    version,
    about = "Colored-voxel scene pipeline: datasets, splats, reference renders and neural rendering"
)]
struct Cli {
    /// Base seed for anything stochastic.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Optional `key = value` configuration file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory where outputs are written.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a train/test dataset of captured scenes, splats and renders.
    GenDataset(GenDatasetArgs),
    /// Capture voxel colors for a scene from its appearance image.
    Capture(SceneArgs),
    /// Splat a scene's voxels into an image.
    Splat(SceneArgs),
    /// Render a scene with the physically based reference renderer.
    Oracle(OracleArgs),
    /// Train a neural renderer on a generated dataset.
    Train(TrainArgs),
    /// Render a scene with a trained neural model.
    Infer(InferArgs),
    /// Compare two images (mean squared error, structural dissimilarity, feature distance).
    Eval(EvalArgs),
    /// Apply pose/light/camera edits to a scene file.
    Edit(EditArgs),
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let config = match &cli.config {
        Some(path) => Some(ConfigMap::load(path)?),
        None => None,
    };
    let globals = Globals { seed: cli.seed, out: cli.out.clone(), config };
    match &cli.command {
        Command::GenDataset(a) => commands::cmd_gen_dataset(&globals, a),
        Command::Capture(a) => commands::cmd_capture(&globals, a),
        Command::Splat(a) => commands::cmd_splat(&globals, a),
        Command::Oracle(a) => commands::cmd_oracle(&globals, a),
        Command::Train(a) => commands::cmd_train(&globals, a),
        Command::Infer(a) => commands::cmd_infer(&globals, a),
        Command::Eval(a) => commands::cmd_eval(&globals, a),
        Command::Edit(a) => commands::cmd_edit(&globals, a),
    }
}

fn main() {
    // Cap the worker pool when asked (useful on shared machines and for
    // reproducing single-threaded timings). Generation output is identical
    // at any thread count.
    if let Ok(v) = std::env::var("VOXELCAST_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: VOXELCAST_THREADS must be a positive integer, got '{v}'");
                std::process::exit(1);
            }
        }
    }
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
