//! `farsight`: one entry point for every stage of the detection cascade.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "farsight", version, about = "GAN-enhanced detection of small, distant objects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Precedence: flag, then config file,
/// then built-in default.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; unknown keys are rejected
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (each subcommand has its own default)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Global seed; every component seed is derived from it
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is bit-reproducible
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download and extract CIFAR-10, or write procedural surrogate batches
    FetchData {
        #[command(flatten)]
        common: Common,
        /// Write class-conditional procedural images in the CIFAR-10 layout
        #[arg(long)]
        surrogate: bool,
        /// Records per training batch file for --surrogate
        #[arg(long)]
        per_batch: Option<usize>,
        /// Archive to download
        #[arg(long, default_value = commands::CIFAR_URL)]
        url: String,
    },
    /// Train the DCGAN on the CIFAR-10 training split
    TrainGan {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides the configured batch size
        #[arg(long)]
        batch_size: Option<usize>,
        /// Overrides the configured learning rate
        #[arg(long)]
        lr: Option<f64>,
        /// Use only the first N training records
        #[arg(long)]
        records: Option<usize>,
    },
    /// Fit the linear probe on pooled discriminator features
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        /// GAN checkpoint; defaults to paths.gan_checkpoint
        #[arg(long, value_name = "PATH")]
        gan: Option<PathBuf>,
        /// Training records the probe is fitted on
        #[arg(long)]
        train: Option<usize>,
        /// Test records the probe is scored on
        #[arg(long)]
        test: Option<usize>,
        /// L2 penalty
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Compose a scene archive from one CIFAR-10 split
    ComposeBench {
        #[command(flatten)]
        common: Common,
        /// `test` composes the evaluation benchmark, `train` the detector's training scenes
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Number of scenes to compose
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train the single-shot detector on a scene archive
    TrainDetector {
        #[command(flatten)]
        common: Common,
        /// Scene archive directory
        #[arg(long, value_name = "DIR")]
        scenes_dir: Option<PathBuf>,
        /// Overrides the configured epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides the configured batch size
        #[arg(long)]
        batch_size: Option<usize>,
        /// Overrides the configured learning rate
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Enhance image chips by latent projection through the generator
    Enhance {
        #[command(flatten)]
        common: Common,
        /// GAN checkpoint; defaults to paths.gan_checkpoint
        #[arg(long, value_name = "PATH")]
        gan: Option<PathBuf>,
        /// PNG files to enhance
        #[arg(long = "input", value_name = "PNG", required = true)]
        inputs: Vec<PathBuf>,
        /// Projection steps per restart
        #[arg(long)]
        steps: Option<usize>,
        /// Projection restarts
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Run the detector alone over a scene archive
    Detect {
        #[command(flatten)]
        common: Common,
        /// Detector checkpoint; defaults to paths.detector_checkpoint
        #[arg(long, value_name = "PATH")]
        detector: Option<PathBuf>,
        /// Scene archive directory
        #[arg(long, value_name = "DIR")]
        scenes_dir: Option<PathBuf>,
        /// Confidence threshold; defaults to eval.conf_thr
        #[arg(long)]
        conf: Option<f64>,
    },
    /// Compare the detector alone with the cascade and write the report
    Compare {
        #[command(flatten)]
        common: Common,
        /// GAN checkpoint; defaults to paths.gan_checkpoint
        #[arg(long, value_name = "PATH")]
        gan: Option<PathBuf>,
        /// Classifier checkpoint; defaults to paths.classifier_checkpoint
        #[arg(long, value_name = "PATH")]
        classifier: Option<PathBuf>,
        /// Detector checkpoint; defaults to paths.detector_checkpoint
        #[arg(long, value_name = "PATH")]
        detector: Option<PathBuf>,
        /// Scene archive directory
        #[arg(long, value_name = "DIR")]
        scenes_dir: Option<PathBuf>,
        /// Projection steps per restart
        #[arg(long)]
        steps: Option<usize>,
        /// Projection restarts
        #[arg(long)]
        restarts: Option<usize>,
        /// Classifier confidence needed to promote a candidate; 1.0 disables promotion
        #[arg(long)]
        t_rescore: Option<f64>,
    },
    /// Re-emit CSV and plot from an existing report.json
    Report {
        #[command(flatten)]
        common: Common,
        /// report.json to re-emit
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands::*;
    match cli.command {
        Command::FetchData {
            common,
            surrogate,
            per_batch,
            url,
        } => fetch_data(&common, surrogate, per_batch, &url),
        Command::TrainGan {
            common,
            epochs,
            batch_size,
            lr,
            records,
        } => train_gan(&common, GanOverrides { epochs, batch_size, lr, records }),
        Command::TrainClassifier {
            common,
            gan,
            train,
            test,
            lambda,
        } => train_classifier(&common, gan, train, test, lambda),
        Command::ComposeBench { common, split, scenes } => compose_bench(&common, split, scenes),
        Command::TrainDetector {
            common,
            scenes_dir,
            epochs,
            batch_size,
            lr,
        } => train_detector(&common, scenes_dir, epochs, batch_size, lr),
        Command::Enhance {
            common,
            gan,
            inputs,
            steps,
            restarts,
        } => enhance(&common, gan, &inputs, steps, restarts),
        Command::Detect {
            common,
            detector,
            scenes_dir,
            conf,
        } => detect(&common, detector, scenes_dir, conf),
        Command::Compare {
            common,
            gan,
            classifier,
            detector,
            scenes_dir,
            steps,
            restarts,
            t_rescore,
        } => compare(
            &common,
            CompareOverrides {
                gan,
                classifier,
                detector,
                scenes_dir,
                steps,
                restarts,
                t_rescore,
            },
        ),
        Command::Report { common, input } => report(&common, &input),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("farsight: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
