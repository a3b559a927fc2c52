//! Patch-local mutual-information registration and patch-based liver
//! fibrosis staging.
//!
//! The pipeline: rigidly align every modality to the GED4 reference
//! ([`reg`]), cut overlapping multi-channel axial patches from the masked
//! liver ([`patches`]), classify each patch ([`clf`]), and turn the fraction
//! of Stage-4-like patches into per-task probabilities and decisions
//! ([`staging`]). [`metrics`] scores segmentations and classifications and
//! [`phantom`] generates synthetic studies with known ground truth.

pub mod clf;
pub mod imgcore;
pub mod metrics;
pub mod mi;
pub mod patches;
pub mod phantom;
pub mod reg;
pub mod staging;

pub use imgcore::{ContrastMode, Geometry, Mask, Modality, Stage, Study, Volume};
pub use mi::{BinningMode, HistogramConfig, JointHistogram, PatchGrid};
pub use reg::{RegistrationConfig, RigidTransform};
pub use staging::{StageResult, Thresholds};


