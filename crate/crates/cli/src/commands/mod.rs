//! Command implementations. Each submodule is one subcommand's logic,
//! returning structured results so integration tests can run commands
//! in-process; the binary layer only parses flags and prints.

pub mod evaluate;
pub mod gan;
pub mod ingest;
pub mod pipeline;

use std::fs;
use std::path::Path;

use gandl_core::data::image_io::{load_image_directory, IngestWarning};
use gandl_core::data::{synth_fixture_dataset, Dataset};
use gandl_core::metrics::CLASS_NAMES;
use gandl_core::Error as CoreError;

use crate::config::RunConfig;
use crate::error::Result;

/// Loads the run's source dataset: the configured image tree when
/// `data_root` is set, the synthetic fixture otherwise. Returns the
/// dataset together with any per-file ingestion warnings.
pub(crate) fn load_source(config: &RunConfig) -> Result<(Dataset, Vec<IngestWarning>)> {
    match &config.data_root {
        Some(root) => {
            let ingest = load_image_directory(root, config.image_size)?;
            Ok((ingest.dataset, ingest.skipped))
        }
        None => {
            let dataset = synth_fixture_dataset(
                config.fixture_kind()?,
                config.fixture.per_class,
                config.image_size,
                config.fixture.noise,
                config.seed,
            )?;
            Ok((dataset, Vec::new()))
        }
    }
}

/// Resolves a class name (`Normal`/`Pneumonia`, case-insensitive, or the
/// numeric label) to its label value.
pub(crate) fn class_label(name: &str) -> Result<u8> {
    for (label, class) in CLASS_NAMES.iter().enumerate() {
        if name.eq_ignore_ascii_case(class) || name == label.to_string() {
            return Ok(label as u8);
        }
    }
    Err(CoreError::InvalidHyperparameter(format!(
        "unknown class `{name}` (expected {} or {})",
        CLASS_NAMES[0], CLASS_NAMES[1]
    ))
    .into())
}

/// Lowercase class name for file stems (`gan_normal.gdlc`).
pub(crate) fn class_file_stem(class: u8) -> String {
    CLASS_NAMES[class as usize].to_lowercase()
}

/// Writes text to a file, mapping failures to the offending path.
pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| {
        CoreError::Io { path: path.to_path_buf(), detail: e.to_string() }.into()
    })
}

/// Creates a directory (and parents), mapping failures to the path.
pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| {
        CoreError::Io { path: path.to_path_buf(), detail: e.to_string() }.into()
    })
}
