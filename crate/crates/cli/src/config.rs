//! Run configuration: one JSON file, overridable per flag, defaulted per field.
//!
//! Precedence is flags > file > defaults, so a config file is a complete,
//! reproducible record of an experiment and a flag is a one-off deviation
//! from it. Unknown keys in the file are an error — a typoed field must not
//! silently fall back to its default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gandl_core::data::{FixtureKind, SplitOrder, SplitSpec};
use gandl_core::models::BackboneKind;
use gandl_core::training::{
    ClassifierTrainConfig, GanTrainConfig, GeneratorLoss, OptimizerConfig,
};
use gandl_core::Error as CoreError;

use crate::error::{CliError, Result};

/// A full pipeline run, as one serializable value.
///
/// Every field has a default (listed on the field), so `{}` is a valid
/// config file and the zero-flag invocation runs the synthetic-fixture
/// pipeline end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Class-per-directory image tree (`<root>/Normal`, `<root>/Pneumonia`).
    /// Default: absent — the synthetic fixture below is used instead.
    pub data_root: Option<PathBuf>,
    /// Where checkpoints, reports, and the run summary land. Default `gandl-out`.
    pub output_dir: PathBuf,
    /// `"sound"` splits into train/test first and augments only the train
    /// side, so no synthetic image can reach the test set. `"paper"` augments
    /// the whole set first and splits the merged result, reproducing the
    /// published protocol (and its leakage). Default `"sound"`.
    pub mode: String,
    /// Stratified fraction of the input kept before any other phase;
    /// `1.0` keeps everything. The published protocol trains on roughly a
    /// tenth of the source data and synthesizes the rest. Default `1.0`.
    pub subsample_fraction: f64,
    /// Dataset growth factor: each class is grown to `multiplier ×` its real
    /// count. `1` disables synthesis entirely. Default `10`.
    pub multiplier: usize,
    /// Square image edge in pixels; ingested images are resized to it.
    /// Default `64`.
    pub image_size: usize,
    /// Train share of the split. Default `0.8`.
    pub train_fraction: f64,
    /// Global seed; every stochastic phase derives its own stream from it.
    /// Default `0`.
    pub seed: u64,
    /// Synthetic dataset used when `data_root` is absent.
    pub fixture: FixtureSection,
    /// Adversarial-training hyperparameters, shared by every per-class GAN.
    pub gan: GanSection,
    /// Fine-tuning hyperparameters for the classification stage.
    pub classifier: ClassifierSection,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            data_root: None,
            output_dir: PathBuf::from("gandl-out"),
            mode: "sound".into(),
            subsample_fraction: 1.0,
            multiplier: 10,
            image_size: 64,
            train_fraction: 0.8,
            seed: 0,
            fixture: FixtureSection::default(),
            gan: GanSection::default(),
            classifier: ClassifierSection::default(),
        }
    }
}

/// Synthetic-fixture parameters (used only when no `data_root` is given).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSection {
    /// `"bars"` or `"blobs"`. Default `"bars"`.
    pub kind: String,
    /// Images per class. Default `200`.
    pub per_class: usize,
    /// Gaussian pixel-noise standard deviation. Default `0.15`.
    pub noise: f64,
}

impl Default for FixtureSection {
    fn default() -> FixtureSection {
        FixtureSection { kind: "bars".into(), per_class: 200, noise: 0.15 }
    }
}

/// Adversarial-training hyperparameters. Defaults follow the standard
/// DCGAN recipe (Adam at 2e-4 with β₁ = 0.5).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanSection {
    /// Adversarial iterations per class. Default `2000`.
    pub iterations: usize,
    /// Images per adversarial step. Default `16`.
    pub batch_size: usize,
    /// Noise-vector width. Default `100`.
    pub latent_dim: usize,
    /// Channel-ladder base width for generator and discriminator. Default `32`.
    pub base_channels: usize,
    /// Discriminator updates per generator update. Default `1`.
    pub d_steps: usize,
    /// `"non_saturating"` or `"minimax"`. Default `"non_saturating"`.
    pub generator_loss: String,
    /// Adam learning rate for both players. Default `2e-4`.
    pub learning_rate: f64,
    /// Adam first-moment decay. Default `0.5`.
    pub beta1: f64,
}

impl Default for GanSection {
    fn default() -> GanSection {
        GanSection {
            iterations: 2000,
            batch_size: 16,
            latent_dim: 100,
            base_channels: 32,
            d_steps: 1,
            generator_loss: "non_saturating".into(),
            learning_rate: 2e-4,
            beta1: 0.5,
        }
    }
}

/// Fine-tuning hyperparameters for the classification stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    /// `alexnet_mini`, `squeezenet_mini`, `googlenet_mini`, or
    /// `resnet18_mini`. Default `resnet18_mini`.
    pub backbone: String,
    /// Passes over the training set. Default `30`.
    pub epochs: usize,
    /// Images per optimizer step. Default `32`.
    pub batch_size: usize,
    /// Adam learning rate. Default `1e-3`.
    pub learning_rate: f64,
    /// Adam first-moment decay. Default `0.9`.
    pub beta1: f64,
    /// Train only the two-class head, leaving backbone weights fixed.
    /// Default `false`: without pretrained weights a frozen backbone is
    /// random, so whole-network training is the useful baseline.
    pub freeze_backbone: bool,
}

impl Default for ClassifierSection {
    fn default() -> ClassifierSection {
        ClassifierSection {
            backbone: "resnet18_mini".into(),
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            freeze_backbone: false,
        }
    }
}

/// Command-line overrides; `None` means “keep the file/default value”.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub mode: Option<String>,
    pub subsample_fraction: Option<f64>,
    pub multiplier: Option<usize>,
    pub image_size: Option<usize>,
    pub seed: Option<u64>,
    pub gan_iterations: Option<usize>,
    pub epochs: Option<usize>,
    pub backbone: Option<String>,
}

/// Loads the config file (defaults when `path` is `None`), applies flag
/// overrides, and validates the result.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut config = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                CliError::Core(CoreError::Io { path: p.to_path_buf(), detail: e.to_string() })
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Malformed { path: p.to_path_buf(), detail: e.to_string() })?
        }
    };
    apply_overrides(&mut config, overrides);
    config.validate()?;
    Ok(config)
}

fn apply_overrides(config: &mut RunConfig, o: &Overrides) {
    if let Some(v) = &o.data_root {
        config.data_root = Some(v.clone());
    }
    if let Some(v) = &o.output_dir {
        config.output_dir = v.clone();
    }
    if let Some(v) = &o.mode {
        config.mode = v.clone();
    }
    if let Some(v) = o.subsample_fraction {
        config.subsample_fraction = v;
    }
    if let Some(v) = o.multiplier {
        config.multiplier = v;
    }
    if let Some(v) = o.image_size {
        config.image_size = v;
    }
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if let Some(v) = o.gan_iterations {
        config.gan.iterations = v;
    }
    if let Some(v) = o.epochs {
        config.classifier.epochs = v;
    }
    if let Some(v) = &o.backbone {
        config.classifier.backbone = v.clone();
    }
}

impl RunConfig {
    /// Rejects values no phase could accept, so a bad config fails before
    /// any work starts. Numeric ranges the engine already polices are left
    /// to it; this catches the string-typed fields and cross-field facts.
    pub fn validate(&self) -> Result<()> {
        self.split_order()?;
        self.classifier_backbone()?;
        self.fixture_kind()?;
        self.gan.loss()?;
        if self.multiplier < 1 {
            return Err(CoreError::InvalidHyperparameter(
                "multiplier must be >= 1".into(),
            )
            .into());
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(CoreError::InvalidHyperparameter(format!(
                "subsample_fraction must be in (0, 1], got {}",
                self.subsample_fraction
            ))
            .into());
        }
        Ok(())
    }

    /// The split discipline the `mode` string names.
    pub fn split_order(&self) -> Result<SplitOrder> {
        match self.mode.as_str() {
            "sound" => Ok(SplitOrder::SplitBeforeAugment),
            "paper" => Ok(SplitOrder::SplitAfterAugment),
            other => Err(CoreError::InvalidHyperparameter(format!(
                "unknown mode `{other}` (expected sound or paper)"
            ))
            .into()),
        }
    }

    pub fn classifier_backbone(&self) -> Result<BackboneKind> {
        Ok(self.classifier.backbone.parse::<BackboneKind>()?)
    }

    pub fn fixture_kind(&self) -> Result<FixtureKind> {
        Ok(self.fixture.kind.parse::<FixtureKind>()?)
    }

    /// Split parameters for this run.
    pub fn split_spec(&self) -> Result<SplitSpec> {
        Ok(SplitSpec {
            train_fraction: self.train_fraction,
            stratified: true,
            seed: self.seed,
            order: self.split_order()?,
        })
    }

    /// Adversarial-training config for one class. Classes get disjoint
    /// seeds (the trainer derives two per run, one per player), so no two
    /// GANs share an init or noise stream.
    pub fn gan_config(&self, class: u8) -> Result<GanTrainConfig> {
        Ok(GanTrainConfig {
            iterations: self.gan.iterations,
            batch_size: self.gan.batch_size,
            latent_dim: self.gan.latent_dim,
            base_channels: self.gan.base_channels,
            image_size: self.image_size,
            d_steps: self.gan.d_steps,
            generator_loss: self.gan.loss()?,
            g_opt: OptimizerConfig::adam(self.gan.learning_rate, self.gan.beta1),
            d_opt: OptimizerConfig::adam(self.gan.learning_rate, self.gan.beta1),
            seed: self.seed + 2 * class as u64,
        })
    }

    /// Fine-tuning config for the classification stage.
    pub fn classifier_config(&self) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            epochs: self.classifier.epochs,
            batch_size: self.classifier.batch_size,
            opt: OptimizerConfig::adam(self.classifier.learning_rate, self.classifier.beta1),
            seed: self.seed,
        }
    }
}

impl GanSection {
    fn loss(&self) -> Result<GeneratorLoss> {
        Ok(self.generator_loss.parse::<GeneratorLoss>()?)
    }
}
