//! `gandl` — GAN-augmented two-class image classification, end to end.
//!
//! Exit codes: 0 success; 2 missing class directory; 3 non-finite
//! training loss; 4 unparseable input (checkpoint, config, or matrices
//! file); 5 published-table mismatch; 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gandl_cli::commands::evaluate::{run_evaluate, run_verify_tables};
use gandl_cli::commands::gan::{run_generate, run_train_gan};
use gandl_cli::commands::ingest::run_ingest;
use gandl_cli::commands::pipeline::run_pipeline;
use gandl_cli::{exit_code, load_config, Overrides, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "gandl",
    version,
    about = "Grow a small two-class image dataset with per-class GANs and fine-tune a CNN on it"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config-file plus override flags, shared by the commands that run
/// training. Precedence: flags > file > defaults.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON run config; built-in defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed for every stochastic phase.
    #[arg(long)]
    seed: Option<u64>,
    /// `sound` (split, then augment the train side) or `paper` (augment
    /// everything, then split).
    #[arg(long)]
    mode: Option<String>,
    /// Per-class dataset growth factor; 1 disables synthesis.
    #[arg(long)]
    multiplier: Option<usize>,
    /// Stratified fraction of the input kept before any other phase.
    #[arg(long)]
    subsample_fraction: Option<f64>,
    /// Square image edge in pixels.
    #[arg(long)]
    image_size: Option<usize>,
    /// Where checkpoints, reports, and the summary are written.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Class-per-directory image tree; the synthetic fixture is used when
    /// neither this flag nor the config file names one.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Adversarial iterations per class.
    #[arg(long)]
    gan_iterations: Option<usize>,
    /// Fine-tuning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Classifier backbone (alexnet_mini, squeezenet_mini, googlenet_mini,
    /// resnet18_mini).
    #[arg(long)]
    backbone: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let overrides = Overrides {
            data_root: self.data_root.clone(),
            output_dir: self.output_dir.clone(),
            mode: self.mode.clone(),
            subsample_fraction: self.subsample_fraction,
            multiplier: self.multiplier,
            image_size: self.image_size,
            seed: self.seed,
            gan_iterations: self.gan_iterations,
            epochs: self.epochs,
            backbone: self.backbone.clone(),
        };
        load_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Scan a class-per-directory image tree and write a dataset manifest.
    Ingest {
        /// Root directory holding `Normal/` and `Pneumonia/`.
        #[arg(long)]
        data: PathBuf,
        /// Square size images are normalized to.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Manifest file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the GAN pair for one class and save the generator checkpoint.
    TrainGan {
        #[command(flatten)]
        config: ConfigArgs,
        /// Class to train on: Normal, Pneumonia, or the numeric label.
        #[arg(long)]
        class: String,
    },
    /// Write synthetic images from a saved generator checkpoint.
    Generate {
        /// Generator checkpoint (.gdlc).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of images to write.
        #[arg(long)]
        count: usize,
        /// Output directory for the PNGs.
        #[arg(long, default_value = "generated")]
        out: PathBuf,
        /// Noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the whole method: subsample, GANs, synthesis, split, fine-tune,
    /// evaluate.
    Pipeline {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a saved classifier on a class-per-directory image tree.
    Evaluate {
        /// Classifier checkpoint (.gdlc).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Root directory holding `Normal/` and `Pneumonia/`.
        #[arg(long)]
        data: PathBuf,
        /// Images per forward pass.
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Check the published tables against their own confusion matrices.
    VerifyTables {
        /// JSON file mapping each backbone name to its 2×2 count matrix.
        #[arg(long)]
        matrices: PathBuf,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { data, size, out } => {
            let summary = run_ingest(&data, size, &out)?;
            println!(
                "wrote {} with {} records ({} files skipped)",
                out.display(),
                summary.records,
                summary.skipped
            );
        }
        Command::TrainGan { config, class } => {
            let config = config.resolve()?;
            let outcome = run_train_gan(&config, &class)?;
            println!(
                "trained {} iterations; final d_real={:.4} d_fake={:.4}",
                outcome.rows, outcome.final_d_real, outcome.final_d_fake
            );
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("report:     {}", outcome.report_path.display());
        }
        Command::Generate { checkpoint, count, out, seed } => {
            let written = run_generate(&checkpoint, count, &out, seed)?;
            println!("wrote {written} images to {}", out.display());
        }
        Command::Pipeline { config } => {
            let config = config.resolve()?;
            let outcome = run_pipeline(&config)?;
            print!("{}", outcome.summary);
            print!("{}", outcome.confusion_text);
            println!("artifacts: {}", outcome.output_dir.display());
        }
        Command::Evaluate { checkpoint, data, batch_size } => {
            let outcome = run_evaluate(&checkpoint, &data, batch_size)?;
            print!("{}", outcome.confusion_text);
            print!("{}", outcome.metrics_text);
        }
        Command::VerifyTables { matrices } => {
            let check = run_verify_tables(&matrices)?;
            print!("{}", check.report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
