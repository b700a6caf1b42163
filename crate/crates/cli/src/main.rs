use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::RunConfig;

/// Failure reported as `error[CODE]: message` on a single stderr line.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<voxfield::Error> for CliError {
    fn from(e: voxfield::Error) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("E_IO", e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::new("E_IO", e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::new("E_IO", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("E_IO", e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "voxfield", version, about = "Uncertainty-aware voxel feature fields from posed RGB-D frames")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; replaces the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Trajectory {
    Orbit,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    Sphere,
    Tabletop,
    Search,
    Room,
}

#[derive(Subcommand)]
enum Command {
    /// Render a frame archive of a scene.
    Synth {
        /// Scene file; mutually exclusive with --preset.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        scene: Option<PathBuf>,
        /// Procedural scene, seeded by --seed; its scene file is written next to the frames.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_frames: usize,
        #[arg(long, value_enum, default_value = "orbit")]
        trajectory: Trajectory,
    },
    /// Fuse frame archives into a state snapshot, or merge snapshots with --merge.
    Fuse {
        /// Frame archives, fused in order.
        #[arg(long)]
        frames: Vec<PathBuf>,
        /// Snapshots to merge.
        #[arg(long, num_args = 1.., conflicts_with = "frames")]
        merge: Vec<PathBuf>,
        /// Scene file whose bounds define the grid.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on synthesized scene directories.
    Train {
        /// Directories written by `synth --preset` or holding frames.vffa + scene.toml.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render color, depth and uncertainty buffers at the poses of a frame archive.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Uncertainty and reconstruction reports.
    Eval {
        /// CSV with `error,uncertainty` columns; evaluates the pairs directly.
        #[arg(long, conflicts_with_all = ["checkpoint", "state", "frames", "scene"])]
        pairs: Option<PathBuf>,
        #[arg(long, required_unless_present = "pairs")]
        checkpoint: Option<PathBuf>,
        #[arg(long, required_unless_present = "pairs")]
        state: Option<PathBuf>,
        /// Held-out frames.
        #[arg(long, required_unless_present = "pairs")]
        frames: Option<PathBuf>,
        #[arg(long, required_unless_present = "pairs")]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Similarity volume and colored mesh for the configured query class.
    Query {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        state: PathBuf,
        /// Scene file providing the set of negative classes.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one active search episode.
    Explore {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(CliError::new("E_USAGE", "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new("E_USAGE", e.to_string()))?;
    }
    let cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides, cli.common.seed)?;
    match cli.command {
        Command::Synth {
            scene,
            preset,
            out,
            n_frames,
            trajectory,
        } => commands::synth(&cfg, scene.as_deref(), preset, &out, n_frames, trajectory),
        Command::Fuse {
            frames,
            merge,
            scene,
            checkpoint,
            out,
        } => {
            if merge.is_empty() {
                commands::fuse(&cfg, &frames, scene.as_deref(), checkpoint.as_deref(), &out)
            } else {
                commands::merge(&merge, &out)
            }
        }
        Command::Train { data, out } => commands::train(&cfg, &data, &out),
        Command::Render {
            checkpoint,
            state,
            frames,
            stride,
            out,
        } => commands::render(&cfg, &checkpoint, &state, &frames, stride, &out),
        Command::Eval {
            pairs: Some(pairs),
            out,
            ..
        } => commands::eval_pairs(&pairs, &out),
        Command::Eval {
            checkpoint,
            state,
            frames,
            scene,
            out,
            ..
        } => commands::eval(
            &cfg,
            &checkpoint.unwrap(),
            &state.unwrap(),
            &frames.unwrap(),
            &scene.unwrap(),
            &out,
        ),
        Command::Query {
            checkpoint,
            state,
            scene,
            out,
        } => commands::query(&cfg, &checkpoint, &state, &scene, &out),
        Command::Explore { checkpoint, scene, out } => commands::explore(&cfg, &checkpoint, &scene, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
