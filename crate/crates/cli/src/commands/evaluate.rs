//! `evaluate` and `verify-tables`: score a saved classifier on a real
//! image tree, and check the published tables against their matrices.

use std::path::Path;

use gandl_core::data::checkpoint::load_checkpoint;
use gandl_core::data::image_io::load_image_directory;
use gandl_core::metrics::{confusion_from_predictions, metrics_report, MetricsReport};
use gandl_core::models::{ModelGraph, ModelKind};
use gandl_core::training::predict_labels;
use gandl_core::Error as CoreError;

use crate::error::{CliError, Result};
use crate::tables::{parse_matrices_file, verify_tables, TableCheck};

/// What `evaluate` produced: the rendered confusion matrix and metrics,
/// plus the parsed report for programmatic use.
#[derive(Debug)]
pub struct EvaluateOutcome {
    pub confusion_text: String,
    pub metrics_text: String,
    pub metrics: MetricsReport,
}

/// Loads a classifier checkpoint, ingests the class tree at the model's
/// input size, and scores it.
pub fn run_evaluate(checkpoint: &Path, data: &Path, batch_size: usize) -> Result<EvaluateOutcome> {
    let model: ModelGraph<f32> = load_checkpoint(checkpoint)?;
    if !matches!(model.meta.kind, ModelKind::Backbone(_)) {
        return Err(CoreError::CorruptArchive(format!(
            "checkpoint holds a {:?} model, not a classifier",
            model.meta.kind
        ))
        .into());
    }
    let ingest = load_image_directory(data, model.meta.image_size)?;
    let predicted = predict_labels(&model, &ingest.dataset, batch_size)?;
    let matrix = confusion_from_predictions(&predicted, &ingest.dataset.labels())?;
    let metrics = metrics_report(&matrix)?;
    Ok(EvaluateOutcome {
        confusion_text: matrix.render(),
        metrics_text: metrics.render(),
        metrics,
    })
}

/// Parses a matrices file and verifies the published tables against it.
/// Any cell that matches neither its published value nor a documented
/// anomaly fails the run.
pub fn run_verify_tables(matrices: &Path) -> Result<TableCheck> {
    let parsed = parse_matrices_file(matrices)?;
    let check = verify_tables(&parsed)?;
    if check.mismatched() > 0 {
        return Err(CliError::OracleMismatch { report: check.report });
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use std::io::Write as _;
    use std::path::PathBuf;

    use gandl_core::data::checkpoint::save_checkpoint;
    use gandl_core::data::image_io::save_grayscale_png;
    use gandl_core::data::{synth_fixture_dataset, FixtureKind};
    use gandl_core::models::{build_backbone, build_generator, BackboneKind};
    use gandl_core::training::{train_classifier, ClassifierTrainConfig};

    use crate::error::exit_code;

    fn fixture_path() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/published_confusion_matrices.json")
    }

    /// Writes a bars tree and a classifier trained on the same
    /// distribution, returning (tree root, checkpoint path).
    fn trained_setup(dir: &Path) -> (PathBuf, PathBuf) {
        let train = synth_fixture_dataset(FixtureKind::Bars, 24, 16, 0.05, 1).unwrap();
        let mut model =
            build_backbone::<f32>(BackboneKind::ResNet18Mini, 16, 2, 7).unwrap();
        let config = ClassifierTrainConfig { epochs: 3, batch_size: 8, ..Default::default() };
        train_classifier(&mut model, &train, &config).unwrap();
        let checkpoint = dir.join("clf.gdlc");
        save_checkpoint(&model, &checkpoint).unwrap();

        let eval = synth_fixture_dataset(FixtureKind::Bars, 6, 16, 0.05, 2).unwrap();
        let root = dir.join("tree");
        for class in ["Normal", "Pneumonia"] {
            fs::create_dir_all(root.join(class)).unwrap();
        }
        let mut counters = [0usize; 2];
        for record in &eval.records {
            let class = ["Normal", "Pneumonia"][record.label as usize];
            let n = counters[record.label as usize];
            counters[record.label as usize] += 1;
            save_grayscale_png(&root.join(class).join(format!("{n:02}.png")), &record.pixels, 16)
                .unwrap();
        }
        (root, checkpoint)
    }

    #[test]
    fn evaluate_scores_a_saved_classifier_on_a_directory_tree() {
        let tmp = tempfile::tempdir().unwrap();
        let (root, checkpoint) = trained_setup(tmp.path());
        let outcome = run_evaluate(&checkpoint, &root, 4).unwrap();
        assert!(outcome.metrics.accuracy >= 0.5, "bars should be mostly learnable");
        assert!(outcome.metrics_text.contains("accuracy="));
        assert!(outcome.confusion_text.contains("predicted"));
    }

    #[test]
    fn evaluate_rejects_a_generator_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let generator = build_generator::<f32>(8, 4, 8, 3).unwrap();
        let checkpoint = tmp.path().join("g.gdlc");
        save_checkpoint(&generator, &checkpoint).unwrap();
        let err = run_evaluate(&checkpoint, tmp.path(), 4).unwrap_err();
        assert_eq!(exit_code(&err), 4);
        assert!(err.to_string().contains("not a classifier"));
    }

    #[test]
    fn shipped_fixture_verifies_clean() {
        let check = run_verify_tables(&fixture_path()).unwrap();
        assert_eq!(check.mismatched(), 0);
        assert_eq!(check.flagged(), 3);
    }

    #[test]
    fn drifted_matrices_exit_5() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(
            br#"{"alexnet_mini": [[400, 101], [68, 679]],
                 "squeezenet_mini": [[405, 3], [63, 777]],
                 "googlenet_mini": [[463, 13], [5, 767]],
                 "resnet18_mini": [[462, 6], [6, 774]]}"#,
        )
        .unwrap();
        let err = run_verify_tables(f.path()).unwrap_err();
        assert_eq!(exit_code(&err), 5);
        assert!(err.to_string().contains("MISMATCH"));
    }

    #[test]
    fn perfect_matrices_score_100_everywhere_but_fail_verification() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(
            br#"{"alexnet_mini": [[468, 0], [0, 780]],
                 "squeezenet_mini": [[468, 0], [0, 780]],
                 "googlenet_mini": [[468, 0], [0, 780]],
                 "resnet18_mini": [[468, 0], [0, 780]]}"#,
        )
        .unwrap();
        let err = run_verify_tables(f.path()).unwrap_err();
        // A flawless classifier is not what was published: every computed
        // metric reads 100%, and verification honestly reports the drift.
        let report = err.to_string();
        assert!(report.contains("accuracy=100.00%"));
        assert!(report.contains("f1=100.00%"));
        assert_eq!(exit_code(&err), 5);
    }
}
