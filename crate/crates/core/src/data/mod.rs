//! Datasets and everything that produces or persists them: directory
//! ingestion, stratified subsampling and splitting, synthetic desk-scale
//! fixtures, and bit-exact checkpoint archives.
//!
//! A [`Dataset`] is a flat list of grayscale [`ImageRecord`]s sharing one
//! square size, with pixels in `[0, 1]`. Class labels are `0 = Normal`,
//! `1 = Pneumonia` — the alphabetical directory order, fixed so confusion
//! matrices stay comparable across runs. Subsampling and splitting are
//! stratified per class and deterministic under a seed; records keep their
//! ingestion order within each side of a split so the same seed always
//! yields byte-identical datasets.

pub mod checkpoint;
pub mod image_io;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Whether an image came from disk or from a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        })
    }
}

/// One grayscale image: id, row-major pixels in `[0, 1]`, class label, and
/// provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Vec<f32>,
    pub label: u8,
    pub provenance: Provenance,
}

impl ImageRecord {
    /// Validates pixel count, range, and label before admitting the record.
    pub fn new(
        id: impl Into<String>,
        pixels: Vec<f32>,
        label: u8,
        provenance: Provenance,
        image_size: usize,
    ) -> Result<ImageRecord> {
        let id = id.into();
        if label > 1 {
            return Err(Error::InvalidLabel(u64::from(label)));
        }
        if pixels.len() != image_size * image_size {
            return Err(Error::LengthMismatch {
                left: pixels.len(),
                right: image_size * image_size,
            });
        }
        if !pixels.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)) {
            return Err(Error::InvalidTarget(format!(
                "record `{id}` has pixels outside [0, 1]"
            )));
        }
        Ok(ImageRecord { id, pixels, label, provenance })
    }
}

/// A list of same-sized grayscale images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub image_size: usize,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn new(image_size: usize) -> Dataset {
        Dataset { image_size, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of records per label, ascending by label.
    pub fn class_counts(&self) -> BTreeMap<u8, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.label).or_insert(0) += 1;
        }
        counts
    }

    /// Record indices per label, each list in dataset order.
    pub fn class_indices(&self) -> BTreeMap<u8, Vec<usize>> {
        let mut indices: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            indices.entry(r.label).or_default().push(i);
        }
        indices
    }

    /// New dataset holding clones of the records at `indices`, in the order
    /// given.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            image_size: self.image_size,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// All labels, in record order.
    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }
}

/// Where the train/test split happens relative to augmentation.
///
/// `SplitAfterAugment` reproduces the published protocol: augmentation comes
/// first, so synthetic images appear in the test set — that ordering is what
/// makes the with-augmentation test totals come out to 1,248. The default,
/// `SplitBeforeAugment`, augments the training side only, which is the
/// methodologically sound choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitOrder {
    SplitAfterAugment,
    #[default]
    SplitBeforeAugment,
}

impl SplitOrder {
    pub fn name(self) -> &'static str {
        match self {
            SplitOrder::SplitAfterAugment => "split_after_augment",
            SplitOrder::SplitBeforeAugment => "split_before_augment",
        }
    }
}

impl fmt::Display for SplitOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<SplitOrder> {
        match s {
            "split_after_augment" => Ok(SplitOrder::SplitAfterAugment),
            "split_before_augment" => Ok(SplitOrder::SplitBeforeAugment),
            other => Err(Error::InvalidHyperparameter(format!(
                "unknown split order `{other}` (expected split_after_augment or split_before_augment)"
            ))),
        }
    }
}

/// How to cut a dataset into train and test sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
    pub order: SplitOrder,
}

impl Default for SplitSpec {
    fn default() -> SplitSpec {
        SplitSpec {
            train_fraction: 0.8,
            stratified: true,
            seed: 0,
            order: SplitOrder::default(),
        }
    }
}

/// Stratified random subsample: per class, keeps `round(fraction × count)`
/// records, chosen by seeded shuffle but returned in dataset order.
/// `fraction == 1.0` is the identity.
pub fn subsample_fraction(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidHyperparameter(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("subsample input"));
    }
    let mut rng = rng::seeded_stream(seed, streams::SHUFFLE);
    let mut selected = Vec::new();
    for (_, indices) in dataset.class_indices() {
        let keep = (fraction * indices.len() as f64).round() as usize;
        let order = rng::shuffled_indices(&mut rng, indices.len());
        selected.extend(order[..keep].iter().map(|&j| indices[j]));
    }
    selected.sort_unstable();
    Ok(dataset.subset(&selected))
}

/// Splits into disjoint, exhaustive train/test sides. Stratified mode takes
/// `floor(fraction × count)` of each class for training and the remainder
/// for testing; members are chosen by seeded shuffle and each side keeps
/// dataset order.
pub fn split_dataset(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidHyperparameter(format!(
            "train fraction must be in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("split input"));
    }
    let mut rng = rng::seeded_stream(spec.seed, streams::SHUFFLE);
    let mut train = Vec::new();
    let mut test = Vec::new();
    if spec.stratified {
        for (label, indices) in dataset.class_indices() {
            if indices.len() < 2 {
                return Err(Error::TooSmall(format!(
                    "class {label} has {} record(s); stratified splitting needs at least 2",
                    indices.len()
                )));
            }
            let n_train = (spec.train_fraction * indices.len() as f64).floor() as usize;
            let order = rng::shuffled_indices(&mut rng, indices.len());
            train.extend(order[..n_train].iter().map(|&j| indices[j]));
            test.extend(order[n_train..].iter().map(|&j| indices[j]));
        }
    } else {
        let n = dataset.len();
        if n < 2 {
            return Err(Error::TooSmall(format!(
                "dataset has {n} record(s); splitting needs at least 2"
            )));
        }
        let n_train = (spec.train_fraction * n as f64).floor() as usize;
        let order = rng::shuffled_indices(&mut rng, n);
        train.extend_from_slice(&order[..n_train]);
        test.extend_from_slice(&order[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Synthetic fixture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    /// Class 0 = one horizontal bright bar, class 1 = one vertical bright bar.
    Bars,
    /// Class 0 = one Gaussian bump, class 1 = two Gaussian bumps.
    Blobs,
}

impl FixtureKind {
    pub fn name(self) -> &'static str {
        match self {
            FixtureKind::Bars => "bars",
            FixtureKind::Blobs => "blobs",
        }
    }
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<FixtureKind> {
        match s {
            "bars" => Ok(FixtureKind::Bars),
            "blobs" => Ok(FixtureKind::Blobs),
            other => Err(Error::InvalidHyperparameter(format!(
                "unknown fixture kind `{other}` (expected bars or blobs)"
            ))),
        }
    }
}

const FIXTURE_BACKGROUND_BARS: f32 = 0.1;
const FIXTURE_BAR_VALUE: f32 = 0.9;
const FIXTURE_BACKGROUND_BLOBS: f32 = 0.05;
const FIXTURE_BUMP_AMPLITUDE: f64 = 0.8;

/// Builds a two-class synthetic dataset, `n_per_class` records of each class
/// at `size × size` pixels, with Gaussian pixel noise of standard deviation
/// `noise` (clipped back to `[0, 1]`). Deterministic under `seed`; both
/// families are separable by a simple pixel statistic at `noise == 0`.
///
/// `bars` varies the bar position but keeps it off the first and last
/// row/column, so the two classes stay linearly separable. `blobs` varies
/// the bump centers by a small jitter; class 1 carries roughly twice the
/// brightness mass of class 0.
pub fn synth_fixture_dataset(
    kind: FixtureKind,
    n_per_class: usize,
    size: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class < 1 {
        return Err(Error::InvalidHyperparameter("fixture needs n_per_class ≥ 1".into()));
    }
    if size < 8 {
        return Err(Error::InvalidHyperparameter(format!(
            "fixture size must be ≥ 8, got {size}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!(
            "fixture noise must be finite and ≥ 0, got {noise}"
        )));
    }
    let mut rng = rng::seeded_stream(seed, streams::FIXTURE);
    let noise_dist =
        if noise > 0.0 { Some(Normal::new(0.0, noise).expect("validated above")) } else { None };
    let mut dataset = Dataset::new(size);
    for label in 0u8..2 {
        for i in 0..n_per_class {
            let mut pixels = match kind {
                FixtureKind::Bars => bars_image(label, size, &mut rng),
                FixtureKind::Blobs => blobs_image(label, size, &mut rng),
            };
            if let Some(dist) = &noise_dist {
                for p in &mut pixels {
                    *p = (*p + dist.sample(&mut rng) as f32).clamp(0.0, 1.0);
                }
            }
            let id = format!("{kind}-{label}-{i:04}");
            dataset.records.push(ImageRecord::new(id, pixels, label, Provenance::Real, size)?);
        }
    }
    Ok(dataset)
}

/// One bright bar on a dim background. The bar stays at least one pixel away
/// from the image border.
fn bars_image(label: u8, size: usize, rng: &mut impl Rng) -> Vec<f32> {
    let thickness = (size / 8).max(1);
    let pos = rng.random_range(1..=size - 1 - thickness);
    let mut pixels = vec![FIXTURE_BACKGROUND_BARS; size * size];
    for t in 0..thickness {
        for k in 0..size {
            let (row, col) = if label == 0 { (pos + t, k) } else { (k, pos + t) };
            pixels[row * size + col] = FIXTURE_BAR_VALUE;
        }
    }
    pixels
}

/// One or two Gaussian bumps on a dim background, centers jittered.
fn blobs_image(label: u8, size: usize, rng: &mut impl Rng) -> Vec<f32> {
    let s = size as f64;
    let sigma = s / 5.0;
    let span = s / 10.0;
    let mut jittered = |y: f64, x: f64| -> (f64, f64) {
        (y + rng.random_range(-span..=span), x + rng.random_range(-span..=span))
    };
    let centers: Vec<(f64, f64)> = if label == 0 {
        vec![jittered(s / 2.0, s / 2.0)]
    } else {
        vec![jittered(s / 2.0, s / 4.0), jittered(s / 2.0, 3.0 * s / 4.0)]
    };
    let mut pixels = vec![FIXTURE_BACKGROUND_BLOBS; size * size];
    for row in 0..size {
        for col in 0..size {
            let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
            let mut v = f64::from(FIXTURE_BACKGROUND_BLOBS);
            for &(cy, cx) in &centers {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                v += FIXTURE_BUMP_AMPLITUDE * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            pixels[row * size + col] = (v as f32).clamp(0.0, 1.0);
        }
    }
    pixels
}
