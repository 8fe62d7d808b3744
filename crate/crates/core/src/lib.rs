//! Coarse-to-fine volumetric segmentation and landmark detection.
//!
//! The pipeline segments two bony structures (midface, mandible) and
//! detects grouped anatomical landmarks (bone / teeth / face) from a 3D
//! scan in two sequential stages:
//!
//! 1. **Coarse** — the input is downsampled to a fixed coarse resolution
//!    and a shared voxel-classifier architecture runs three times: one
//!    segmentation model and two landmark detectors (bone, face), the
//!    detectors transfer-initialized from the segmentation weights.
//! 2. **Refinement** — ROIs derived from the coarse mask and landmarks are
//!    cropped from the *original* image: a global box around the whole
//!    skull and two thin-bone boxes are re-segmented at high resolution
//!    with patch-based sliding-window inference, and a tooth box is run
//!    through a dedicated tooth landmark detector. Refined masks are
//!    merged and zero-padded back onto the original grid.
//!
//! Supporting modules provide the volume geometry core, the landmark
//! sphere-mask codec, training for all five stages, evaluation metrics,
//! and a synthetic phantom generator with analytically exact ground truth
//! for desk-scale experiments.

pub mod error;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod roi;
pub mod landmark;
pub mod nifti;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};

/// Crate version, reported in run logs and provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
