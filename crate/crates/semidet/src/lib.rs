//! Semi-supervised fine-grained detection building blocks.
//!
//! The library covers the mechanism side of training a detector from
//! box-annotated coarse classes plus image-labelled fine classes:
//!
//! - [`taxonomy`]: class hierarchies and the one-hot semantic correlation
//!   encoding (hyponym / hypernym closures).
//! - [`visual`] / [`kmeans`]: visual correlations from class embeddings
//!   (hard and soft assignment, super-class clustering).
//! - [`attention`]: soft-attention proposal re-ranking that transfers coarse
//!   detector confidence to fine-class proposal scores.
//! - [`losses`]: detection, weakly-supervised and memory objectives with
//!   hand-derived gradients and a finite-difference checker.
//! - [`memory`]: dual-level prototype memory (proposal-level coarse bank,
//!   image-level fine bank) with foreground-attention pooling.
//! - [`sim`], [`eval`], [`train`]: a synthetic scene harness standing in for
//!   a backbone+RPN, the evaluation stack (IoU, soft-NMS, mAP, CorLoc) and
//!   the end-to-end training loop with the ablation ladder.
//! - [`config`]: flat key-value run configuration shared by the CLI.

pub mod attention;
pub mod correlation;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod grid;
pub mod kmeans;
pub mod losses;
pub mod memory;
pub mod numeric;
pub mod sim;
pub mod taxonomy;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
