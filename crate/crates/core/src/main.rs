use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use talkstyle::config::{RunConfig, Stage};
use talkstyle::workspace::Workspace;
use talkstyle::Error;

#[derive(Parser)]
#[command(
    name = "talkstyle",
    version,
    about = "Stylized talking-face motion on a synthetic corpus"
)]
struct Cli {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_root` from the config.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    /// Replace existing artifacts.
    #[arg(long, global = true)]
    force: bool,
    /// Compose artifacts produced under a different config.
    #[arg(long, global = true)]
    allow_mismatch: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainStage {
    Expert,
    Semantic,
    Sdse,
    Diffusion,
    /// The independent style encoder used to score style similarity.
    Probe,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    SynthData,
    /// Train one stage; earlier stages must already exist.
    Train {
        #[arg(long, value_enum)]
        stage: TrainStage,
        /// Continue an interrupted run from its last snapshot.
        #[arg(long)]
        resume: bool,
    },
    /// Sample motion for an audio feature file in the style of a reference.
    Generate {
        /// Raw f32 features, frames x audio_dim.
        #[arg(long)]
        audio: PathBuf,
        /// Motion sequence directory.
        #[arg(long)]
        style_ref: PathBuf,
        /// Directory for the generated sequence and telemetry.
        #[arg(long)]
        out: PathBuf,
        /// Sampling steps; only the full schedule is supported.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write trajectories.svg.
        #[arg(long)]
        plot: bool,
    },
    /// Proxy metrics on the test split.
    Eval {
        /// Score the ground truth against itself.
        #[arg(long)]
        identity: bool,
    },
    /// Train and score every ablation variant.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn run(cli: Cli) -> talkstyle::Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(root) = cli.output_root {
        config.output_root = root;
    }
    let ws = Workspace {
        force: cli.force,
        allow_mismatch: cli.allow_mismatch,
        ..Workspace::new(config)
    };
    match cli.command {
        Command::SynthData => {
            let dir = ws.synth_data()?;
            println!("{}", dir.display());
        }
        Command::Train { stage, resume } => {
            let stage = match stage {
                TrainStage::Expert => Stage::Expert,
                TrainStage::Semantic => Stage::Semantic,
                TrainStage::Sdse => Stage::Sdse,
                TrainStage::Diffusion => Stage::Diffusion,
                TrainStage::Probe => Stage::Probe,
            };
            let dir = ws.train(stage, resume)?;
            println!("{}", dir.display());
        }
        Command::Generate {
            audio,
            style_ref,
            out,
            steps,
            seed,
            plot,
        } => {
            let (seq, tel) = ws.generate(&audio, &style_ref, &out, steps, seed, plot)?;
            println!(
                "{} frames to {}; mean D upper {:.4}, lower {:.4}",
                seq.len(),
                out.display(),
                tel.mean_d(talkstyle::diffusion::Region::Upper),
                tel.mean_d(talkstyle::diffusion::Region::Lower)
            );
        }
        Command::Eval { identity } => {
            let (dir, report) = ws.eval(identity)?;
            let a = report.aggregate;
            println!(
                "proxy metrics ({}): MLMD {:.4}  FLMD {:.4}  Sync {:.4}  StyleSim {:.4}",
                report.split, a.mlmd, a.flmd, a.sync, a.stylesim
            );
            if let Some(m) = report.modulation {
                println!(
                    "dominance: mean upper {:.4}, lower {:.4}, range [{:.4}, {:.4}]{}",
                    m.mean_d_upper,
                    m.mean_d_lower,
                    m.d_min,
                    m.d_max,
                    if m.lower_exceeds_upper {
                        ""
                    } else {
                        " (lower does not exceed upper)"
                    }
                );
            }
            println!("{}", dir.display());
        }
        Command::Ablate { seeds } => {
            let (dir, table) = ws.ablate(seeds)?;
            print!("{}", table.render_text());
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::RefusedOverwrite(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
