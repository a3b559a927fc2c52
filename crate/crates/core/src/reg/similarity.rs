use serde::{Deserialize, Serialize};

use crate::imgcore::Mask;
use crate::mi::{BinningMode, HistogramConfig, KahanSum, MiError, PatchGrid, PatchMi, PatchWindow};

/// A loss over moving-image intensities sampled on the fixed grid.
pub trait Similarity: Send + Sync {
    fn loss(&self, moving: &[f64]) -> Result<f64, MiError>;
}

impl Similarity for PatchMi {
    fn loss(&self, moving: &[f64]) -> Result<f64, MiError> {
        PatchMi::loss(self, moving)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    /// Patch-local mutual information, soft binning.
    #[default]
    Mi,
    /// Patch-local normalized cross-correlation, for ablations.
    Ncc,
}

/// `1 - mean NCC` over the same patch lattice the MI loss uses.
#[derive(Clone, Debug)]
pub struct PatchNcc {
    dims: [usize; 3],
    windows: Vec<PatchWindow>,
    fixed: Vec<f64>,
}

impl PatchNcc {
    pub fn new(
        fixed: &[f64],
        dims: [usize; 3],
        grid: &PatchGrid,
        restriction: Option<&Mask>,
    ) -> Result<Self, MiError> {
        grid.validate()?;
        let windows = grid.windows(dims, restriction);
        if windows.is_empty() {
            return Err(MiError::NoPatches);
        }
        Ok(Self { dims, windows, fixed: fixed.to_vec() })
    }

    fn patch_ncc(&self, w: &PatchWindow, moving: &[f64]) -> f64 {
        let n = w.len() as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for k in w.voxels(self.dims) {
            sx += self.fixed[k];
            sy += moving[k];
        }
        let (mx, my) = (sx / n, sy / n);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for k in w.voxels(self.dims) {
            let dx = self.fixed[k] - mx;
            let dy = moving[k] - my;
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
        let denom = (sxx * syy).sqrt();
        if denom > 1e-12 {
            sxy / denom
        } else {
            0.0
        }
    }
}

impl Similarity for PatchNcc {
    fn loss(&self, moving: &[f64]) -> Result<f64, MiError> {
        if moving.len() != self.fixed.len() {
            return Err(MiError::LengthMismatch(self.fixed.len(), moving.len()));
        }
        let mut acc = KahanSum::default();
        for w in &self.windows {
            acc.add(self.patch_ncc(w, moving));
        }
        Ok(1.0 - acc.value() / self.windows.len() as f64)
    }
}

pub(crate) fn build(
    kind: SimilarityKind,
    fixed: &[f64],
    dims: [usize; 3],
    grid: &PatchGrid,
    restriction: Option<&Mask>,
    hist: &HistogramConfig,
) -> Result<Box<dyn Similarity>, MiError> {
    Ok(match kind {
        SimilarityKind::Mi => {
            Box::new(PatchMi::new(fixed, dims, grid, restriction, hist, BinningMode::Soft)?)
        }
        SimilarityKind::Ncc => Box::new(PatchNcc::new(fixed, dims, grid, restriction)?),
    })
}
