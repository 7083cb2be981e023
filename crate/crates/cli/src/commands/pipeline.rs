//! `pipeline`: the full method in one run — subsample, per-class GAN
//! training, synthesis to the configured multiplier, train/test split,
//! classifier fine-tuning, and evaluation.
//!
//! The two modes differ only in where the split happens. `paper` augments
//! the whole input and splits the merged set, reproducing the published
//! protocol — synthetic images land in the test set. `sound` splits the
//! real data first and augments only the training side, so the test set
//! is real by construction; the run summary records the synthetic test
//! count, which must be zero, and the code asserts it.
//!
//! Everything the run produces lands in `output_dir`: the resolved
//! config, GAN checkpoints and reports, the classifier checkpoint and
//! report, the confusion matrix, the metrics report, and a `summary.txt`
//! with every count. If any phase fails, whatever was already written is
//! moved under `output_dir/failed/` next to an `error.txt`, so a partial
//! run can never be mistaken for a finished one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gandl_core::augment::{generate_synthetic, merge_datasets, plan_augmentation};
use gandl_core::data::checkpoint::save_checkpoint;
use gandl_core::data::{split_dataset, subsample_fraction, Dataset, Provenance, SplitOrder};
use gandl_core::metrics::{confusion_from_predictions, metrics_report, MetricsReport, CLASS_NAMES};
use gandl_core::models::{build_backbone, freeze_backbone};
use gandl_core::training::{predict_labels, train_classifier, train_gan};

use crate::commands::{class_file_stem, ensure_dir, load_source, write_text};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Every count the run summary reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineCounts {
    pub real_total: usize,
    pub real_per_class: BTreeMap<u8, usize>,
    pub synthetic_total: usize,
    pub merged_total: usize,
    pub train_total: usize,
    pub test_total: usize,
    pub train_synthetic: usize,
    pub test_synthetic: usize,
    pub skipped_files: usize,
}

/// What a finished pipeline run produced.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub counts: PipelineCounts,
    pub metrics: MetricsReport,
    /// Exact bytes of `metrics.txt`.
    pub metrics_text: String,
    /// Exact bytes of `confusion.txt`.
    pub confusion_text: String,
    /// Exact bytes of `summary.txt`.
    pub summary: String,
    pub output_dir: PathBuf,
}

/// Runs the pipeline described by `config`. On failure, artifacts written
/// so far are moved under `output_dir/failed/` with the error text.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    ensure_dir(&config.output_dir)?;
    match execute(config) {
        Ok(outcome) => Ok(outcome),
        Err(err) => {
            mark_failed(&config.output_dir, &err);
            Err(err)
        }
    }
}

fn execute(config: &RunConfig) -> Result<PipelineOutcome> {
    let out = &config.output_dir;
    let resolved = serde_json::to_string_pretty(config).expect("config serializes");
    write_text(&out.join("config_resolved.json"), &resolved)?;

    let (source, skipped) = load_source(config)?;
    let real = subsample_fraction(&source, config.subsample_fraction, config.seed)?;
    let split_spec = config.split_spec()?;
    let order = split_spec.order;

    let (train, test, synthetic_total) = match order {
        SplitOrder::SplitAfterAugment => {
            let (merged, synthetic_total) = augment(config, &real, out)?;
            let (train, test) = split_dataset(&merged, &split_spec)?;
            (train, test, synthetic_total)
        }
        SplitOrder::SplitBeforeAugment => {
            let (train_real, test) = split_dataset(&real, &split_spec)?;
            let (train, synthetic_total) = augment(config, &train_real, out)?;
            (train, test, synthetic_total)
        }
    };

    let counts = PipelineCounts {
        real_total: real.len(),
        real_per_class: real.class_counts(),
        synthetic_total,
        merged_total: train.len() + test.len(),
        train_total: train.len(),
        test_total: test.len(),
        train_synthetic: synthetic_count(&train),
        test_synthetic: synthetic_count(&test),
        skipped_files: skipped.len(),
    };
    // Structural invariant of the sound mode: the test side was carved out
    // before any image was synthesized.
    if order == SplitOrder::SplitBeforeAugment {
        assert_eq!(
            counts.test_synthetic, 0,
            "sound mode placed a synthetic image in the test set"
        );
    }

    let kind = config.classifier_backbone()?;
    let mut model = build_backbone::<f32>(kind, config.image_size, 2, config.seed)?;
    if config.classifier.freeze_backbone {
        freeze_backbone(&mut model, true)?;
    }
    let classifier_report = train_classifier(&mut model, &train, &config.classifier_config())?;
    save_checkpoint(&model, &out.join("classifier.gdlc"))?;
    write_text(&out.join("classifier_report.txt"), &classifier_report.render())?;

    let predicted = predict_labels(&model, &test, config.classifier.batch_size)?;
    let matrix = confusion_from_predictions(&predicted, &test.labels())?;
    let metrics = metrics_report(&matrix)?;
    let confusion_text = matrix.render();
    let metrics_text = metrics.render();
    write_text(&out.join("confusion.txt"), &confusion_text)?;
    write_text(&out.join("metrics.txt"), &metrics_text)?;

    let summary = render_summary(config, &counts, &metrics);
    write_text(&out.join("summary.txt"), &summary)?;

    Ok(PipelineOutcome {
        counts,
        metrics,
        metrics_text,
        confusion_text,
        summary,
        output_dir: out.clone(),
    })
}

/// Grows `base` to `multiplier ×` per class: trains one GAN per class that
/// needs synthetic images, saves each generator checkpoint and report,
/// synthesizes, and merges. Returns the merged set and the synthetic
/// count. With multiplier 1 nothing is trained or generated and the input
/// comes back as-is.
fn augment(config: &RunConfig, base: &Dataset, out: &Path) -> Result<(Dataset, usize)> {
    let mut plan = plan_augmentation::<f32>(base, config.multiplier, config.seed)?;
    let needed: Vec<(u8, usize)> = plan
        .synthetic_counts()
        .iter()
        .filter(|(_, &count)| count > 0)
        .map(|(&class, &count)| (class, count))
        .collect();
    if needed.is_empty() {
        return Ok((base.clone(), 0));
    }
    let indices = base.class_indices();
    for &(class, _) in &needed {
        let class_set = base.subset(&indices[&class]);
        let (generator, _discriminator, report) =
            train_gan::<f32>(&class_set, &config.gan_config(class)?)?;
        let stem = class_file_stem(class);
        save_checkpoint(&generator, &out.join(format!("gan_{stem}.gdlc")))?;
        write_text(&out.join(format!("gan_{stem}_report.txt")), &report.render())?;
        plan.attach_generator(class, generator)?;
    }
    let synthetic = generate_synthetic(&plan)?;
    let merged = merge_datasets(base, &synthetic)?;
    Ok((merged, synthetic.len()))
}

fn synthetic_count(dataset: &Dataset) -> usize {
    dataset.records.iter().filter(|r| r.provenance == Provenance::Synthetic).count()
}

/// Stable key=value summary. Identical runs produce identical bytes, so
/// summaries diff cleanly across experiments.
fn render_summary(config: &RunConfig, counts: &PipelineCounts, metrics: &MetricsReport) -> String {
    let mut out = String::new();
    let source = match &config.data_root {
        Some(root) => format!("directory:{}", root.display()),
        None => format!("fixture:{}", config.fixture.kind),
    };
    let _ = writeln!(out, "mode={}", config.mode);
    let _ = writeln!(out, "seed={}", config.seed);
    let _ = writeln!(out, "data_source={source}");
    let _ = writeln!(out, "image_size={}", config.image_size);
    let _ = writeln!(out, "subsample_fraction={}", config.subsample_fraction);
    let _ = writeln!(out, "multiplier={}", config.multiplier);
    let _ = writeln!(out, "train_fraction={}", config.train_fraction);
    let _ = writeln!(out, "skipped_files={}", counts.skipped_files);
    let _ = writeln!(out, "real_total={}", counts.real_total);
    for (&class, &count) in &counts.real_per_class {
        let name = CLASS_NAMES[class as usize].to_lowercase();
        let _ = writeln!(out, "real_{name}={count}");
    }
    let _ = writeln!(out, "synthetic_total={}", counts.synthetic_total);
    let _ = writeln!(out, "merged_total={}", counts.merged_total);
    let _ = writeln!(out, "train_total={}", counts.train_total);
    let _ = writeln!(out, "test_total={}", counts.test_total);
    let _ = writeln!(out, "train_synthetic={}", counts.train_synthetic);
    let _ = writeln!(out, "test_synthetic={}", counts.test_synthetic);
    let _ = writeln!(out, "backbone={}", config.classifier.backbone);
    let _ = writeln!(out, "epochs={}", config.classifier.epochs);
    let _ = writeln!(out, "freeze_backbone={}", config.classifier.freeze_backbone);
    out.push_str(&metrics.render());
    out
}

/// Moves everything already written into `failed/` and records the error,
/// best-effort: reporting the original failure matters more than any
/// trouble encountered while quarantining.
fn mark_failed(out: &Path, err: &CliError) {
    let failed = out.join("failed");
    if fs::create_dir_all(&failed).is_err() {
        return;
    }
    if let Ok(entries) = fs::read_dir(out) {
        for entry in entries.flatten() {
            if entry.file_name() == "failed" {
                continue;
            }
            let _ = fs::rename(entry.path(), failed.join(entry.file_name()));
        }
    }
    let _ = fs::write(failed.join("error.txt"), format!("{err}\n"));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ClassifierSection, FixtureSection, GanSection};

    /// A pipeline config that finishes in test time: tiny images, a
    /// narrow GAN, two epochs.
    fn tiny_config(out: &Path) -> RunConfig {
        RunConfig {
            output_dir: out.to_path_buf(),
            mode: "sound".into(),
            multiplier: 2,
            image_size: 16,
            seed: 3,
            fixture: FixtureSection { kind: "bars".into(), per_class: 16, noise: 0.1 },
            gan: GanSection {
                iterations: 6,
                batch_size: 8,
                latent_dim: 8,
                base_channels: 4,
                ..GanSection::default()
            },
            classifier: ClassifierSection {
                epochs: 2,
                batch_size: 8,
                ..ClassifierSection::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn sound_mode_keeps_synthetic_images_out_of_the_test_set() {
        let tmp = tempfile::tempdir().unwrap();
        let outcome = run_pipeline(&tiny_config(tmp.path())).unwrap();
        assert_eq!(outcome.counts.test_synthetic, 0);
        assert!(outcome.counts.train_synthetic > 0);
        assert!(outcome.summary.contains("test_synthetic=0"));
        // Artifacts all landed.
        for name in [
            "config_resolved.json",
            "gan_normal.gdlc",
            "gan_pneumonia.gdlc",
            "classifier.gdlc",
            "classifier_report.txt",
            "confusion.txt",
            "metrics.txt",
            "summary.txt",
        ] {
            assert!(tmp.path().join(name).exists(), "missing artifact {name}");
        }
    }

    #[test]
    fn paper_mode_count_arithmetic_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let mut config = tiny_config(tmp.path());
        config.mode = "paper".into();
        config.multiplier = 5;
        // 16 per class → 32 real; ×5 → 160 merged; 80/20 → 128/32.
        let outcome = run_pipeline(&config).unwrap();
        assert_eq!(outcome.counts.real_total, 32);
        assert_eq!(outcome.counts.synthetic_total, 128);
        assert_eq!(outcome.counts.merged_total, 160);
        assert_eq!(outcome.counts.train_total, 128);
        assert_eq!(outcome.counts.test_total, 32);
        // The published protocol's leakage, reproduced faithfully: the
        // test side of an augment-first split contains synthetic images.
        assert!(outcome.counts.test_synthetic > 0);
    }

    #[test]
    fn multiplier_one_trains_no_gan_and_equals_the_baseline() {
        let tmp_a = tempfile::tempdir().unwrap();
        let tmp_b = tempfile::tempdir().unwrap();
        let mut config_a = tiny_config(tmp_a.path());
        config_a.multiplier = 1;
        let mut config_b = tiny_config(tmp_b.path());
        config_b.multiplier = 1;

        let a = run_pipeline(&config_a).unwrap();
        assert_eq!(a.counts.synthetic_total, 0);
        assert!(!tmp_a.path().join("gan_normal.gdlc").exists(), "no GAN should be trained");

        // The baseline: same split, same classifier, no augmentation step
        // at all. Its metrics must match the multiplier-1 pipeline's.
        let (source, _) = load_source(&config_b).unwrap();
        let real = subsample_fraction(&source, 1.0, config_b.seed).unwrap();
        let (train, test) = split_dataset(&real, &config_b.split_spec().unwrap()).unwrap();
        let kind = config_b.classifier_backbone().unwrap();
        let mut model = build_backbone::<f32>(kind, config_b.image_size, 2, config_b.seed).unwrap();
        let report = train_classifier(&mut model, &train, &config_b.classifier_config()).unwrap();
        let predicted = predict_labels(&model, &test, config_b.classifier.batch_size).unwrap();
        let matrix = confusion_from_predictions(&predicted, &test.labels()).unwrap();
        let baseline = metrics_report(&matrix).unwrap();

        assert_eq!(a.metrics_text, baseline.render());
        assert!(!report.final_checksum.is_empty());
    }

    #[test]
    fn identical_runs_produce_identical_report_bytes() {
        let tmp_a = tempfile::tempdir().unwrap();
        let tmp_b = tempfile::tempdir().unwrap();
        let a = run_pipeline(&tiny_config(tmp_a.path())).unwrap();
        let b = run_pipeline(&tiny_config(tmp_b.path())).unwrap();
        assert_eq!(a.metrics_text, b.metrics_text);
        assert_eq!(a.confusion_text, b.confusion_text);
        // Summaries differ only in output paths — which they don't record.
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn failed_runs_quarantine_their_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let mut config = tiny_config(tmp.path());
        // Valid config, impossible run: the GAN batch size exceeds the
        // per-class image count, which the trainer rejects after the
        // resolved config was already written.
        config.gan.batch_size = 500;
        let err = run_pipeline(&config).unwrap_err();
        let failed = tmp.path().join("failed");
        assert!(failed.join("error.txt").exists());
        assert!(failed.join("config_resolved.json").exists());
        assert!(!tmp.path().join("config_resolved.json").exists());
        let recorded = std::fs::read_to_string(failed.join("error.txt")).unwrap();
        assert_eq!(recorded.trim_end(), err.to_string());
    }
}
