//! `ingest`: scan a class-per-directory image tree and write a manifest
//! recording exactly what a run would train on.
//!
//! The manifest is plain text: a short header (image size, record and
//! skip counts, skipped files with reasons), then one tab-separated row
//! per record — id, label, and the SHA-256 of the normalized pixel
//! buffer (f32 little-endian bytes). Rescanning an unchanged tree with
//! the same arguments reproduces the manifest byte for byte, so two
//! manifests diff cleanly.

use std::fmt::Write as _;
use std::path::Path;

use gandl_core::data::image_io::{load_image_directory, Ingest};
use sha2::{Digest, Sha256};

use crate::commands::write_text;
use crate::error::Result;

/// What `ingest` produced, for callers and tests.
#[derive(Debug)]
pub struct IngestSummary {
    /// Exact bytes written to the manifest file.
    pub manifest: String,
    pub records: usize,
    pub skipped: usize,
}

/// Scans `data`, resizing to `size × size`, and writes the manifest to
/// `out`. Undecodable files are skipped, counted, and listed; a missing
/// class directory is fatal.
pub fn run_ingest(data: &Path, size: usize, out: &Path) -> Result<IngestSummary> {
    let ingest = load_image_directory(data, size)?;
    let manifest = render_manifest(&ingest, size);
    write_text(out, &manifest)?;
    Ok(IngestSummary {
        manifest,
        records: ingest.dataset.len(),
        skipped: ingest.skipped.len(),
    })
}

/// Renders the manifest text. Pure, so determinism is testable without
/// touching the filesystem.
pub fn render_manifest(ingest: &Ingest, size: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# dataset manifest");
    let _ = writeln!(out, "# image_size: {size}");
    let _ = writeln!(out, "# records: {}", ingest.dataset.len());
    let _ = writeln!(out, "# skipped: {}", ingest.skipped.len());
    for warning in &ingest.skipped {
        let _ = writeln!(out, "# skipped_file: {}: {}", warning.path.display(), warning.reason);
    }
    for record in &ingest.dataset.records {
        let mut hasher = Sha256::new();
        for &pixel in &record.pixels {
            hasher.update(pixel.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = write!(hex, "{byte:02x}");
        }
        let _ = writeln!(out, "{}\t{}\t{hex}", record.id, record.label);
    }
    out
}
