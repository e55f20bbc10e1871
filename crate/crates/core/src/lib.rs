//! Two-stage lesion detection on volumetric multi-modality images.
//!
//! Stage 1 extracts data-driven radiomics (a two-hop Saab cascade over 24x24
//! windows), selects discriminant features, and runs a voxel classifier to
//! produce a probability heatmap from which candidate ROIs are extracted.
//! Stage 2 expands the receptive field to a 72x72 context per ROI and trains
//! a small CNN as a residue regressor that corrects each ROI's probability,
//! reducing false positives.

pub mod case;
pub mod classifier;
pub mod config;
pub mod error;
pub mod features;
pub mod preprocess;
pub mod radhop;
pub mod artifacts;
pub mod eval;
pub mod net;
pub mod overlay;
pub mod phantom;
pub mod pipeline;
pub mod roipatch;
pub mod saab;
pub mod stage1;
pub mod volume;

pub use error::{PipelineError, Result};
