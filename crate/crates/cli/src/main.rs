mod commands;
mod error;
mod runlog;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use kdaction::experiment::ExperimentConfig;
use kdaction::training::{StudentOptimizer, TeacherOptimizer};

use crate::error::CliError;

/// Teacher/student distillation pipeline for clip-level action recognition.
#[derive(Debug, Parser)]
#[command(name = "kdaction", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Experiment config (TOML). Required by train-teacher, distill and sweep.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config leaf, e.g. `--set student.distill.alpha=0.95`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Resolve every relative path against this directory.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AxisArg {
    Alpha,
    Backbone,
    Stage,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a clip manifest, either from a clip tree or as a synthetic fixture.
    Prepare(PrepareArgs),
    /// Train the teacher head on frozen backbone features.
    TrainTeacher(TrainArgs),
    /// Distill a trained teacher into the student.
    Distill(DistillArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Repeat teacher training and distillation over a grid of settings.
    Sweep(SweepArgs),
    /// Render the loss and accuracy curves of a history file.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Generate a class-separable synthetic fixture instead of scanning clips.
    #[arg(long, conflicts_with = "src")]
    pub synthetic: bool,
    /// Clip tree laid out as `<src>/<class>/<clip>`.
    #[arg(long, required_unless_present = "synthetic")]
    pub src: Option<PathBuf>,
    /// Fixture: number of classes.
    #[arg(long, default_value_t = 4, requires = "synthetic")]
    pub classes: usize,
    /// Fixture: clips per class.
    #[arg(long, default_value_t = 18, requires = "synthetic")]
    pub per_class: usize,
    /// Fixture: frames per clip.
    #[arg(long, default_value_t = 25, requires = "synthetic")]
    pub frames: usize,
    /// Fixture: frame height and width in pixels.
    #[arg(long, default_value_t = 32, requires = "synthetic")]
    pub size: usize,
    /// Fraction of each class assigned to the train split.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Seed for the split (and the fixture pixels).
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Fixture: output directory (default data/fixture). Clip tree: manifest
    /// file (default <src>/manifest.jsonl).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from `last.ckpt` in the run directory if it exists.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Teacher checkpoint (default: best.ckpt of the configured teacher run).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Continue from `last.ckpt` in the run directory if it exists.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest to evaluate on (default: the one recorded in the checkpoint or --config).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Output stem for the `.txt` report and `.json` summary
    /// (default: next to the checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    /// Comma-separated settings, e.g. 0.90,0.95,0.97.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Runs per setting (default: eval.run_count from the config).
    #[arg(long)]
    pub runs: Option<usize>,
    /// Comma-separated seeds (default: the first `runs` of eval.seeds).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// History CSV written by train-teacher or distill.
    #[arg(long)]
    pub history: PathBuf,
    /// Output SVG path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Recipe defaults, read from the config defaults so help never drifts.
fn recipe_help() -> String {
    let c = ExperimentConfig::with_manifest("manifest.jsonl");
    let (t, s) = (&c.teacher.train, &c.student.train);
    let TeacherOptimizer::AdaptiveMoment { learning_rate: tlr, .. } = t.optimizer;
    let StudentOptimizer::MomentumSgd { learning_rate: slr, momentum, weight_decay } = s.optimizer;
    let seeds: Vec<String> = c.eval.seeds.iter().map(u64::to_string).collect();
    // config spelling, e.g. "cosine-annealing"
    let word = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
    let schedule = word(serde_json::json!(t.schedule));
    let stage = word(serde_json::json!(s.stage));
    format!(
        "Recipe defaults (change with --set KEY=VALUE or the config file):\n  \
         teacher: {} epochs, batch {}, Adam lr {tlr:e}, {schedule} schedule, backbone frozen\n  \
         student: {} epochs, batch {}, SGD lr {slr:e} momentum {momentum} weight decay {weight_decay:e}\n  \
         distillation: alpha {}, tau {}, {stage} stage\n  \
         frames: {} per clip, {}x{} crop\n  \
         evaluation: {} runs, seeds {}\n\
         Exit codes: 0 ok, 1 I/O failure, 2 usage or config error, 3 non-finite loss.",
        t.epochs,
        t.batch_size,
        s.epochs,
        s.batch_size,
        s.distill.alpha,
        s.distill.tau,
        c.dataset.sampling.num_frames,
        c.dataset.sampling.crop_size,
        c.dataset.sampling.crop_size,
        c.eval.run_count,
        seeds.join(","),
    )
}

fn command() -> clap::Command {
    let help = recipe_help();
    let mut cmd = Cli::command().after_help(help.clone());
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.after_help(help.clone()));
    }
    cmd
}

fn main() -> ExitCode {
    let cli = match Cli::from_arg_matches(&command().get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    runlog::init(cli.global.verbose, cli.global.quiet);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(dir) = &cli.global.workdir {
        std::env::set_current_dir(dir).map_err(|e| CliError::io(dir, e))?;
    }
    match &cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::TrainTeacher(a) => commands::train_teacher(&cli.global, a),
        Command::Distill(a) => commands::distill(&cli.global, a),
        Command::Eval(a) => commands::eval(&cli.global, a),
        Command::Sweep(a) => commands::sweep(&cli.global, a),
        Command::Plot(a) => commands::plot(a),
    }
}
