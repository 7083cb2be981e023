//! GAN-based dataset augmentation: per-class generators grow a dataset to a
//! multiple of its original size.
//!
//! The multiplier fixes the *total*: a multiplier of 10 means the merged
//! dataset is ten times the real one, so each class receives
//! `(multiplier − 1) × real count` synthetic images and class proportions
//! are preserved exactly. One generator per class keeps labeling sound —
//! every synthetic image is labeled by the generator that produced it and
//! carries a `synthetic` provenance flag, so downstream code can always
//! separate real from generated data.

use std::collections::BTreeMap;

use crate::data::{Dataset, ImageRecord, Provenance};
use crate::error::{Error, Result};
use crate::models::{ModelGraph, ModelKind};
use crate::rng::{self, streams};
use crate::tensor::{Element, Tensor};

/// Images generated per forward pass. Fixed, so the noise-stream consumption
/// pattern — and therefore every generated pixel — depends only on the plan.
const GENERATION_BATCH: usize = 64;

/// How much synthetic data to produce, and with which generators.
#[derive(Debug, Clone)]
pub struct AugmentationPlan<E: Element> {
    pub multiplier: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Real images per class in the source dataset.
    pub real_counts: BTreeMap<u8, usize>,
    /// Trained generator per class; attach with [`AugmentationPlan::attach_generator`].
    pub generators: BTreeMap<u8, ModelGraph<E>>,
}

impl<E: Element> AugmentationPlan<E> {
    /// Synthetic images to generate per class: `(multiplier − 1) × real`.
    pub fn synthetic_counts(&self) -> BTreeMap<u8, usize> {
        self.real_counts
            .iter()
            .map(|(&label, &n)| (label, (self.multiplier - 1) * n))
            .collect()
    }

    /// Merged dataset size the plan will produce: `multiplier × real total`.
    pub fn total_after_merge(&self) -> usize {
        self.multiplier * self.real_counts.values().sum::<usize>()
    }

    /// Registers the generator for one class, validating that it is a
    /// generator and produces images of the planned size.
    pub fn attach_generator(&mut self, class: u8, generator: ModelGraph<E>) -> Result<()> {
        if generator.meta.kind != ModelKind::Generator {
            return Err(Error::InvalidHyperparameter(format!(
                "model attached for class {class} is not a generator"
            )));
        }
        if generator.meta.image_size != self.image_size {
            return Err(Error::SizeMismatch {
                expected: self.image_size,
                got: generator.meta.image_size,
            });
        }
        self.generators.insert(class, generator);
        Ok(())
    }

    /// Noise stream for one class's generation, independent per class so the
    /// per-class tasks could run concurrently without changing any output.
    fn class_rng(&self, class: u8) -> rand_chacha::ChaCha8Rng {
        rng::seeded_stream(self.seed, streams::GENERATE + 256 * u64::from(class))
    }
}

/// Computes the per-class synthetic quota for growing `dataset` to
/// `multiplier` times its size. Generators are attached afterwards.
pub fn plan_augmentation<E: Element>(
    dataset: &Dataset,
    multiplier: usize,
    seed: u64,
) -> Result<AugmentationPlan<E>> {
    if multiplier < 1 {
        return Err(Error::InvalidHyperparameter(format!(
            "augmentation multiplier must be ≥ 1, got {multiplier}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("augmentation source"));
    }
    Ok(AugmentationPlan {
        multiplier,
        seed,
        image_size: dataset.image_size,
        real_counts: dataset.class_counts(),
        generators: BTreeMap::new(),
    })
}

/// Runs every class's generator to produce exactly the planned synthetic
/// counts. Generator outputs in `[−1, 1]` are remapped to the dataset's
/// `[0, 1]` pixel range. Pure in (plan, generator parameters, seed).
pub fn generate_synthetic<E: Element>(plan: &AugmentationPlan<E>) -> Result<Dataset> {
    let mut out = Dataset::new(plan.image_size);
    for (&class, &count) in &plan.synthetic_counts() {
        if count == 0 {
            continue;
        }
        let generator =
            plan.generators.get(&class).ok_or(Error::UntrainedGenerator { class })?;
        if generator.meta.image_size != plan.image_size {
            return Err(Error::SizeMismatch {
                expected: plan.image_size,
                got: generator.meta.image_size,
            });
        }
        let mut rng = plan.class_rng(class);
        let mut produced = 0usize;
        while produced < count {
            let batch = (count - produced).min(GENERATION_BATCH);
            let noise: Tensor<E> =
                rng::normal_tensor(&mut rng, &[batch, generator.meta.latent_dim], 0.0, 1.0);
            let images = generator.forward_eval(&noise)?;
            let pixels_per_image = plan.image_size * plan.image_size;
            for i in 0..batch {
                let start = i * pixels_per_image;
                let pixels: Vec<f32> = images.data()[start..start + pixels_per_image]
                    .iter()
                    .map(|&v| (((v.as_f64() + 1.0) / 2.0) as f32).clamp(0.0, 1.0))
                    .collect();
                let id = format!("synthetic/{class}-{:05}", produced + i);
                out.records.push(ImageRecord::new(
                    id,
                    pixels,
                    class,
                    Provenance::Synthetic,
                    plan.image_size,
                )?);
            }
            produced += batch;
        }
    }
    Ok(out)
}

/// Concatenates real and synthetic datasets: real records first, then
/// synthetic, each side in its own order, provenance flags untouched.
pub fn merge_datasets(real: &Dataset, synthetic: &Dataset) -> Result<Dataset> {
    if real.is_empty() {
        return Ok(synthetic.clone());
    }
    if synthetic.is_empty() {
        return Ok(real.clone());
    }
    if real.image_size != synthetic.image_size {
        return Err(Error::SizeMismatch {
            expected: real.image_size,
            got: synthetic.image_size,
        });
    }
    let mut merged = real.clone();
    merged.records.extend(synthetic.records.iter().cloned());
    Ok(merged)
}
