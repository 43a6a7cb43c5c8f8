//! Probabilistic anchor assignment for dense object detectors.
//!
//! The crate covers the full label-assignment and post-processing path of a
//! single-anchor-per-location detector, evaluated on recorded or synthetic
//! model outputs rather than a live network:
//!
//! * [`geometry`]: corner-form boxes, IoU/GIoU, anchor grids and box deltas.
//! * [`losses`]: BCE, focal, IoU and IoU-prediction losses and their composition.
//! * [`gmm`]: two-component 1-D Gaussian mixture fitted by EM.
//! * [`assignment`]: loss-derived anchor scores, per-level top-K candidates and
//!   mixture-based separation into positive, negative and ignored anchors.
//! * [`postprocess`]: unified classification x IoU ranking, NMS and score voting.
//! * [`scenario`]: JSONL scene I/O, synthetic scene generation and statistics.
//! * [`oracles`]: slow brute-force references used by tests and `--self-check`.
//! * [`cli`]: the batch front-end behind the `paa` binary.

pub mod assignment;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod gmm;
pub mod losses;
pub mod oracles;
pub mod plot;
pub mod postprocess;
pub mod scenario;

pub use error::{Error, Result};
pub use geometry::BoxXYXY;
