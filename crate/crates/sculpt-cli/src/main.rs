//! Command-line entry point: dataset generation, model training, MPC
//! sculpting runs and the experiment harnesses.

mod cmd_experiments;
mod cmd_gen_data;
mod cmd_plan;
mod cmd_train;
mod common;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "sculpt",
    version,
    about = "Heightfield sculpting: synthetic material oracle, learned dynamics, visual planning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a self-supervised deformation dataset.
    GenData(GenDataArgs),
    /// Train the dynamics model on a dataset.
    Train(TrainArgs),
    /// Plan and execute a sculpting run against the material oracle.
    Plan(PlanArgs),
    /// Reproduction harnesses emitting CSV/PNG artifacts.
    #[command(subcommand)]
    Experiments(ExperimentsCmd),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; flags override config values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (must be empty); default: runs/<timestamp>_<cmd>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Material preset: foam, dough or sand.
    #[arg(long)]
    material: Option<String>,
    /// Tool preset: rod, bar or wedge.
    #[arg(long)]
    tool: Option<String>,
    /// Number of records.
    #[arg(long, default_value_t = 300)]
    samples: usize,
    /// Action kind: push or pinch (pinch uses the gripper pair).
    #[arg(long, default_value = "push")]
    kind: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory (holds manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Training objective: 3d or 3d+viz.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Goal depth map (.hfd or .pgm). Exclusive with --glyph.
    #[arg(long)]
    goal: Option<PathBuf>,
    /// Synthesize a carved-glyph goal instead of importing one.
    #[arg(long)]
    glyph: Option<char>,
    /// Start scan (.hfd or .pgm); defaults to the flat slab.
    #[arg(long)]
    start: Option<PathBuf>,
    #[arg(long)]
    actions: Option<usize>,
    /// Actions executed between replans.
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    w3d: Option<f64>,
    #[arg(long)]
    wviz: Option<f64>,
    /// Refinement method: gd or cem.
    #[arg(long)]
    refiner: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    refine_iters: Option<usize>,
}

#[derive(Subcommand)]
enum ExperimentsCmd {
    /// Train per material and evaluate every train/test pairing.
    CrossMaterial(CrossMaterialArgs),
    /// Validation loss versus training-set size.
    SampleEfficiency(SampleEfficiencyArgs),
    /// Loss growth as Gaussian noise corrupts planned action parameters.
    NoiseSweep(NoiseSweepArgs),
    /// Paired push-tool versus gripper-pinch sculpting runs on one goal.
    PinchVsPush(PinchVsPushArgs),
}

#[derive(Args)]
struct CrossMaterialArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated material presets.
    #[arg(long, default_value = "foam,dough,sand")]
    materials: String,
    #[arg(long, default_value_t = 200)]
    train_samples: usize,
    #[arg(long, default_value_t = 40)]
    test_samples: usize,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct SampleEfficiencyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    material: Option<String>,
    /// Comma-separated training-set sizes.
    #[arg(long, default_value = "100,300,1000")]
    sizes: String,
    #[arg(long, default_value_t = 40)]
    test_samples: usize,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct NoiseSweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    goal: Option<PathBuf>,
    #[arg(long)]
    glyph: Option<char>,
    #[arg(long, default_value_t = 20)]
    actions: usize,
    /// Comma-separated noise sigmas in normalized parameter units.
    #[arg(long, default_value = "0,0.02,0.05,0.1,0.2,0.4")]
    sigmas: String,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long)]
    greedy_trials: Option<usize>,
    #[arg(long)]
    refine_iters: Option<usize>,
}

#[derive(Args)]
struct PinchVsPushArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint trained on push data.
    #[arg(long)]
    push_model: PathBuf,
    /// Checkpoint trained on pinch data.
    #[arg(long)]
    pinch_model: PathBuf,
    #[arg(long, default_value_t = 30)]
    actions: usize,
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    refine_iters: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data::run(args),
        Command::Train(args) => cmd_train::run(args),
        Command::Plan(args) => cmd_plan::run(args),
        Command::Experiments(cmd) => cmd_experiments::run(cmd),
    };
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(common::exit_code_for(&err));
        }
    }
}
