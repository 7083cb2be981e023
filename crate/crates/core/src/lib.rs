//! GAN-based augmentation for small two-class grayscale image datasets.
//!
//! The crate implements the full method end to end, from scratch:
//!
//! - [`tensor`] — dense tensors with reverse-mode automatic differentiation
//!   (tape-based), including conv / transposed-conv / batch-norm kernels;
//! - [`models`] — a DCGAN-style generator and discriminator pair plus four
//!   miniature CNN backbones (AlexNet-, SqueezeNet-, GoogLeNet- and
//!   ResNet-flavoured) with a trainable two-class head;
//! - [`training`] — Adam/SGD, the adversarial training loop, and supervised
//!   fine-tuning;
//! - [`augment`] — per-class GAN augmentation growing a dataset by an
//!   integer multiplier;
//! - [`data`] — image ingestion, stratified subsampling and splitting,
//!   synthetic fixtures, and a bit-exact checkpoint format;
//! - [`metrics`] — confusion matrices and macro precision/recall/F1.
//!
//! Everything is deterministic under a fixed seed: training runs,
//! augmentation, splits, and reports reproduce byte-for-byte.

pub mod augment;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
