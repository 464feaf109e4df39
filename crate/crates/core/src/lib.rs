//! Dual-task mutual learning for semi-supervised volumetric segmentation.
//!
//! Two networks share one encoder-decoder backbone: `M_s` predicts foreground
//! probabilities, `M_d` regresses normalized signed distance maps. Both are
//! trained on labeled crops with supervised losses and pulled toward each
//! other on every crop through a cross-task consistency loss that compares
//! `M_s`'s probabilities with a steep sigmoid of `M_d`'s distances.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod sdm;
pub mod trainer;

pub use error::{DtmlError, Result};
pub use grid::{binarize, Geometry, Mask, ProbabilityMap, Shape3, SignedDistanceMap, Spacing3, Volume};
