//! `lip2speech`: corpus generation, training, inference, metrics,
//! segmentation and melspectrogram rendering.

mod commands;
mod config;
mod failure;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{CliConfig, Overrides};
use crate::failure::CliResult;

#[derive(Parser, Debug)]
#[command(name = "lip2speech", version, about = "Lip-to-speech synthesis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration file; missing sections take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random stream (overrides the file).
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
struct Synthesis {
    /// Griffin-Lim iterations.
    #[arg(long, value_name = "N")]
    iterations: Option<usize>,
    /// Stop-gate threshold.
    #[arg(long, value_name = "F")]
    threshold: Option<f32>,
    /// Inputs longer than this are split into chunks.
    #[arg(long, value_name = "F")]
    chunk_seconds: Option<f64>,
    /// Upper bound on decoder steps per chunk.
    #[arg(long, value_name = "N")]
    max_steps: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a procedural audiovisual corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Contrastively train the face/speech speaker encoders.
    TrainSpeaker {
        #[command(flatten)]
        common: Common,
        /// Corpus directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Train the lip-to-mel network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Speaker checkpoint; an untrained encoder is used without it.
        #[arg(long, value_name = "PATH")]
        speaker: Option<PathBuf>,
    },
    /// Synthesize speech for one video.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        synthesis: Synthesis,
        /// Model checkpoint. Without --config, `config.json` beside it is used.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Sample directory (corpus layout) or a directory of frames.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Speaker checkpoint; defaults to `speaker.ckpt` beside the model.
        #[arg(long, value_name = "PATH")]
        speaker: Option<PathBuf>,
        /// Also write attention maps.
        #[arg(long)]
        attention: bool,
    },
    /// Intelligibility and distortion metrics for a WAV pair.
    Metrics {
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "WAV")]
        reference: PathBuf,
        #[arg(long, value_name = "WAV")]
        degraded: PathBuf,
        /// Reference transcript (space-separated words).
        #[arg(long)]
        reference_text: Option<String>,
        /// Hypothesis transcript.
        #[arg(long)]
        hypothesis_text: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Cut a face track into 1–3 s clips.
    Segment {
        /// Per-frame detections: JSON array or whitespace-separated 0/1.
        #[arg(long, value_name = "PATH", conflicts_with_all = ["frames", "target"])]
        detections: Option<PathBuf>,
        /// Frames to run the template matcher on.
        #[arg(long, value_name = "DIR", requires = "target")]
        frames: Option<PathBuf>,
        /// Target face image.
        #[arg(long, value_name = "PATH", requires = "frames")]
        target: Option<PathBuf>,
        /// Audio track; clips are written under `clips/` when given.
        #[arg(long, value_name = "WAV", requires = "frames")]
        audio: Option<PathBuf>,
        #[arg(long, default_value_t = 25.0)]
        fps: f64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Render a MEL1 file as a grayscale PGM with a JSON sidecar.
    RenderMel {
        #[arg(long, value_name = "PATH")]
        mel: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn load(common: &Common, synthesis: &Synthesis, fallback: Option<&Path>) -> CliResult<CliConfig> {
    let overrides = Overrides {
        seed: common.seed,
        iterations: synthesis.iterations,
        threshold: synthesis.threshold,
        chunk_seconds: synthesis.chunk_seconds,
        max_steps: synthesis.max_steps,
    };
    let path = common.config.as_deref().or(fallback.filter(|p| p.is_file()));
    CliConfig::load(path, &overrides)
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    match cli.command {
        Command::GenCorpus { common } => {
            let cfg = load(&common, &Synthesis::default(), None)?;
            commands::gen_corpus(&cfg, &common.out)
        }
        Command::TrainSpeaker { common, data } => {
            let cfg = load(&common, &Synthesis::default(), None)?;
            commands::train_speaker(&cfg, &data, &common.out)
        }
        Command::Train { common, data, speaker } => {
            let cfg = load(&common, &Synthesis::default(), None)?;
            commands::train(&cfg, &data, speaker.as_deref(), &common.out)
        }
        Command::Infer {
            common,
            synthesis,
            checkpoint,
            input,
            speaker,
            attention,
        } => {
            let beside = checkpoint.parent().unwrap_or(Path::new(".")).join("config.json");
            let cfg = load(&common, &synthesis, Some(&beside))?;
            commands::infer(
                &cfg,
                &commands::InferArgs {
                    checkpoint: &checkpoint,
                    input: &input,
                    speaker: speaker.as_deref(),
                    attention,
                    out: &common.out,
                },
            )
        }
        Command::Metrics {
            config,
            reference,
            degraded,
            reference_text,
            hypothesis_text,
            out,
        } => {
            let cfg = CliConfig::load(config.as_deref(), &Overrides::default())?;
            commands::metrics(
                &cfg,
                &commands::MetricsArgs {
                    reference: &reference,
                    degraded: &degraded,
                    reference_text: reference_text.as_deref(),
                    hypothesis_text: hypothesis_text.as_deref(),
                    out: out.as_deref(),
                },
            )
        }
        Command::Segment {
            detections,
            frames,
            target,
            audio,
            fps,
            out,
        } => commands::segment(&commands::SegmentArgs {
            detections: detections.as_deref(),
            frames: frames.as_deref(),
            target: target.as_deref(),
            audio: audio.as_deref(),
            fps,
            out: &out,
        }),
        Command::RenderMel { mel, out } => commands::render_mel(&mel, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { failure::Category::Args.exit_code() } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.report_line());
            ExitCode::from(f.category.exit_code() as u8)
        }
    }
}
