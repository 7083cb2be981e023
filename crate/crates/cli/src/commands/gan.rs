//! `train-gan` and `generate`: adversarial training for one class, and
//! image synthesis from a saved generator checkpoint.

use std::path::{Path, PathBuf};

use gandl_core::data::checkpoint::{load_checkpoint, save_checkpoint};
use gandl_core::data::image_io::save_grayscale_png;
use gandl_core::models::{ModelGraph, ModelKind};
use gandl_core::rng::{self, streams};
use gandl_core::training::{train_gan, TrainRow};
use gandl_core::{Error as CoreError, Tensor};

use crate::commands::{class_file_stem, class_label, ensure_dir, load_source};
use crate::config::RunConfig;
use crate::error::Result;

/// Images per generator forward pass during synthesis.
const GENERATION_BATCH: usize = 64;

/// What `train-gan` produced.
#[derive(Debug)]
pub struct TrainGanOutcome {
    pub checkpoint: PathBuf,
    pub report_path: PathBuf,
    /// One row per adversarial iteration.
    pub rows: usize,
    /// Mean discriminator scores of the final iteration.
    pub final_d_real: f64,
    pub final_d_fake: f64,
}

/// Trains the GAN pair for one class of the configured dataset and writes
/// the generator checkpoint plus the per-iteration training report.
pub fn run_train_gan(config: &RunConfig, class_name: &str) -> Result<TrainGanOutcome> {
    let class = class_label(class_name)?;
    let (data, _skipped) = load_source(config)?;
    let indices = data.class_indices().remove(&class).unwrap_or_default();
    let class_set = data.subset(&indices);
    let gan_config = config.gan_config(class)?;
    let (generator, _discriminator, report) = train_gan::<f32>(&class_set, &gan_config)?;

    ensure_dir(&config.output_dir)?;
    let stem = class_file_stem(class);
    let checkpoint = config.output_dir.join(format!("gan_{stem}.gdlc"));
    save_checkpoint(&generator, &checkpoint)?;
    let report_path = config.output_dir.join(format!("gan_{stem}_report.txt"));
    crate::commands::write_text(&report_path, &report.render())?;

    let (final_d_real, final_d_fake) = report
        .rows
        .last()
        .map(|row| match row {
            TrainRow::Gan { d_real, d_fake, .. } => (*d_real, *d_fake),
            TrainRow::Epoch { .. } => (f64::NAN, f64::NAN),
        })
        .unwrap_or((f64::NAN, f64::NAN));
    Ok(TrainGanOutcome {
        checkpoint,
        report_path,
        rows: report.rows.len(),
        final_d_real,
        final_d_fake,
    })
}

/// Loads a generator checkpoint and writes `count` PNG images to
/// `out_dir`, named `gen_00000.png` onward. Deterministic in the seed;
/// `count == 0` writes nothing and succeeds.
pub fn run_generate(checkpoint: &Path, count: usize, out_dir: &Path, seed: u64) -> Result<usize> {
    let generator: ModelGraph<f32> = load_checkpoint(checkpoint)?;
    if generator.meta.kind != ModelKind::Generator {
        return Err(CoreError::CorruptArchive(format!(
            "checkpoint holds a {:?} model, not a generator",
            generator.meta.kind
        ))
        .into());
    }
    ensure_dir(out_dir)?;
    let size = generator.meta.image_size;
    let pixels_per_image = size * size;
    let mut rng = rng::seeded_stream(seed, streams::GENERATE);
    let mut produced = 0usize;
    while produced < count {
        let batch = (count - produced).min(GENERATION_BATCH);
        let noise: Tensor<f32> =
            rng::normal_tensor(&mut rng, &[batch, generator.meta.latent_dim], 0.0, 1.0);
        let images = generator.forward_eval(&noise)?;
        for i in 0..batch {
            let start = i * pixels_per_image;
            let pixels: Vec<f32> = images.data()[start..start + pixels_per_image]
                .iter()
                .map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
                .collect();
            let path = out_dir.join(format!("gen_{:05}.png", produced + i));
            save_grayscale_png(&path, &pixels, size)?;
        }
        produced += batch;
    }
    Ok(count)
}
