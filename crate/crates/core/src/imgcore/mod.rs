//! Image, mask and study data model with file I/O.

mod nifti;
mod study;
mod volume;

use std::path::{Path, PathBuf};

pub use nifti::{load_mask, load_volume, save_mask, save_volume};
pub use study::{
    load_manifest, read_manifest_records, write_manifest, ContrastMode, ManifestRecord, Modality,
    Stage, Study,
};
pub use volume::{percentile, Geometry, Mask, Volume};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed NIfTI: {0}")]
    Format(String),
    #[error("unsupported NIfTI feature: {0}")]
    Unsupported(String),
    #[error("header declares {declared} voxels but payload holds {available}")]
    PayloadMismatch { declared: usize, available: usize },
    #[error("data length {actual} does not match geometry ({expected} voxels)")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    At { path: PathBuf, source: Box<ImageError> },
}

impl ImageError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn at(self, path: &Path) -> Self {
        match self {
            e @ (Self::Io { .. } | Self::At { .. }) => e,
            e => Self::At { path: path.to_path_buf(), source: Box::new(e) },
        }
    }

    /// The error with any path context stripped.
    pub fn root(&self) -> &ImageError {
        match self {
            Self::At { source, .. } => source.root(),
            e => e,
        }
    }
}
