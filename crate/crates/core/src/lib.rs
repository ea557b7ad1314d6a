//! Whole-slide skin-tissue segmentation and MF-versus-eczema classification.
//!
//! The pipeline runs end to end on procedurally generated slides:
//!
//! 1. [`synth`] writes histology-like slides with exact class masks.
//! 2. [`data`] loads manifests and builds patient-grouped splits and folds.
//! 3. [`sampler`] draws class-balanced training patches.
//! 4. [`seg`] defines the U-Net and the compound-scaled EU-Net, [`train`]
//!    fits them.
//! 5. [`tiling`] predicts whole slides tile by tile and stitches the result.
//! 6. [`metrics`] scores predictions with micro-aggregated confusion counts.
//! 7. [`classify`] trains the slide-level classifier with and without the
//!    predicted segmentation map as extra input channels.
//!
//! [`cli`] wires the stages into the `dermaseg` command; `examples/` shows
//! each stage on its own.

pub mod classify;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod sampler;
pub mod seg;
pub mod synth;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
