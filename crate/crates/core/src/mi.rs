//! Patch-local mutual information.
//!
//! For each patch the joint intensity histogram `P` of the fixed and moving
//! image is estimated, and
//!
//! ```text
//! MI = sum_ij P(i,j) * ln((P(i,j) + eps) / (Px(i) * Py(j) + eps))
//! loss = 1 - mean_p MI_p
//! ```
//!
//! Cells with `P(i,j) = 0` contribute exactly zero.
//!
//! Two estimators are provided. Hard binning assigns each sample to one
//! bin. Soft binning spreads each sample over neighbouring bins with the
//! bin-integrated cubic B-spline kernel of width `kernel_width` bins, which
//! makes the loss smooth in the moving intensities; [`PatchMi::gradient`]
//! computes that derivative analytically.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imgcore::{percentile, Mask, Volume};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MiError {
    #[error("sample arrays differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty sample arrays")]
    Empty,
    #[error("fixed and moving volumes differ in dimensions ({0:?} vs {1:?})")]
    DimsMismatch([usize; 3], [usize; 3]),
    #[error("patch grid selects no patches")]
    NoPatches,
    #[error("invalid histogram configuration: {0}")]
    InvalidConfig(String),
    #[error("gradient requires soft binning")]
    HardGradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinningMode {
    Hard,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramConfig {
    pub bins: usize,
    /// Binning range for the fixed image.
    pub range_x: (f64, f64),
    /// Binning range for the moving image.
    pub range_y: (f64, f64),
    pub epsilon: f64,
    /// Parzen kernel width in bins.
    pub kernel_width: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self { bins: 32, range_x: (0.0, 1.0), range_y: (0.0, 1.0), epsilon: 1e-6, kernel_width: 1.0 }
    }
}

impl HistogramConfig {
    pub fn validate(&self) -> Result<(), MiError> {
        let bad = |m: &str| Err(MiError::InvalidConfig(m.to_string()));
        if self.bins < 2 {
            return bad("bins must be at least 2");
        }
        if self.bins > u16::MAX as usize {
            return bad("too many bins");
        }
        for (lo, hi) in [self.range_x, self.range_y] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad("intensity range must satisfy min < max");
            }
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.kernel_width > 0.0 && self.kernel_width.is_finite()) {
            return bad("kernel_width must be positive");
        }
        Ok(())
    }

    /// Same settings with the two images' roles exchanged.
    pub fn swapped(&self) -> Self {
        Self { range_x: self.range_y, range_y: self.range_x, ..*self }
    }

    /// Copy of `self` with both ranges set from robust percentiles.
    pub fn with_ranges_from(&self, fixed: &Volume, moving: &Volume, mask: Option<&Mask>) -> Self {
        Self {
            range_x: intensity_range(fixed, mask),
            range_y: intensity_range(moving, None),
            ..*self
        }
    }
}

/// 0.5th to 99.5th percentile of the intensities, over `mask` when given.
/// A degenerate range is widened to unit length.
pub fn intensity_range(v: &Volume, mask: Option<&Mask>) -> (f64, f64) {
    let mut values: Vec<f64> = match mask {
        Some(m) if m.dims() == v.dims() && !m.is_empty_mask() => v
            .data()
            .iter()
            .zip(m.data())
            .filter(|(_, &k)| k != 0)
            .map(|(&x, _)| x as f64)
            .collect(),
        _ => v.to_f64(),
    };
    let lo = percentile(&mut values, 0.5).unwrap_or(0.0);
    let hi = percentile(&mut values, 99.5).unwrap_or(1.0);
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

/// Normalized joint histogram, row index = fixed bin.
#[derive(Clone, Debug, PartialEq)]
pub struct JointHistogram {
    bins: usize,
    joint: Vec<f64>,
    marginal_x: Vec<f64>,
    marginal_y: Vec<f64>,
}

impl JointHistogram {
    /// Build from a row-major `bins x bins` array of probabilities.
    pub fn from_joint(bins: usize, joint: Vec<f64>) -> Self {
        assert_eq!(joint.len(), bins * bins, "joint must be bins x bins");
        let mut marginal_x = vec![0.0; bins];
        let mut marginal_y = vec![0.0; bins];
        for i in 0..bins {
            for j in 0..bins {
                let p = joint[i * bins + j];
                marginal_x[i] += p;
                marginal_y[j] += p;
            }
        }
        Self { bins, joint, marginal_x, marginal_y }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.joint[i * self.bins + j]
    }

    pub fn joint(&self) -> &[f64] {
        &self.joint
    }

    pub fn marginal_x(&self) -> &[f64] {
        &self.marginal_x
    }

    pub fn marginal_y(&self) -> &[f64] {
        &self.marginal_y
    }

    pub fn transposed(&self) -> Self {
        let b = self.bins;
        let joint = (0..b * b).map(|k| self.joint[(k % b) * b + k / b]).collect();
        Self {
            bins: b,
            joint,
            marginal_x: self.marginal_y.clone(),
            marginal_y: self.marginal_x.clone(),
        }
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    #[inline]
    pub(crate) fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Mutual information of one joint histogram.
pub fn local_mi(h: &JointHistogram, epsilon: f64) -> f64 {
    let b = h.bins;
    let mut acc = KahanSum::default();
    for i in 0..b {
        let px = h.marginal_x[i];
        for j in 0..b {
            let p = h.joint[i * b + j];
            if p > 0.0 {
                acc.add(p * ((p + epsilon) / (px * h.marginal_y[j] + epsilon)).ln());
            }
        }
    }
    acc.value()
}

/// Cubic B-spline, support [-2, 2], unit mass.
#[inline]
fn bspline3(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        let r = 2.0 - a;
        r * r * r / 6.0
    } else {
        0.0
    }
}

/// Integral of [`bspline3`] from -inf to `t`.
#[inline]
fn bspline3_cdf(t: f64) -> f64 {
    fn left(t: f64) -> f64 {
        // t <= 0
        if t <= -2.0 {
            0.0
        } else if t <= -1.0 {
            let r = 2.0 + t;
            r * r * r * r / 24.0
        } else {
            let t2 = t * t;
            1.0 / 24.0 + 11.0 / 24.0 + (4.0 * t - 2.0 * t2 * t - 0.75 * t2 * t2) / 6.0
        }
    }
    if t <= 0.0 {
        left(t)
    } else {
        1.0 - left(-t)
    }
}

/// Maps intensities to bin weights for one image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Binner {
    bins: usize,
    lo: f64,
    /// bins per intensity unit
    scale: f64,
    width: f64,
    mode: BinningMode,
}

impl Binner {
    pub(crate) fn new(bins: usize, range: (f64, f64), width: f64, mode: BinningMode) -> Self {
        Self { bins, lo: range.0, scale: bins as f64 / (range.1 - range.0), width, mode }
    }

    /// Upper bound on the number of bins one sample touches.
    pub(crate) fn max_taps(&self) -> usize {
        match self.mode {
            BinningMode::Hard => 1,
            BinningMode::Soft => (4.0 * self.width + 1.0).ceil() as usize + 2,
        }
    }

    /// Fill `w` (and `dw`, d weight / d intensity, when given) and return
    /// `(first_bin, tap_count)`.
    #[inline]
    pub(crate) fn taps(&self, v: f64, w: &mut [f64], dw: Option<&mut [f64]>) -> (usize, usize) {
        let last = self.bins - 1;
        let t = (v - self.lo) * self.scale;
        if self.mode == BinningMode::Hard {
            let b = if t.is_nan() || t < 0.0 { 0 } else { (t.floor() as usize).min(last) };
            w[0] = 1.0;
            if let Some(d) = dw {
                d[0] = 0.0;
            }
            return (b, 1);
        }
        // bin centers sit at integer coordinates
        let u = t - 0.5;
        let reach = 2.0 * self.width + 0.5;
        let first = ((u - reach).floor().max(0.0) as usize).min(last);
        let end = ((u + reach).ceil().max(0.0) as usize).min(last);
        let inv_w = 1.0 / self.width;
        let edge = |k: f64| (k - u) * inv_w;
        let mut dw = dw;
        for (n, i) in (first..=end).enumerate() {
            let lo_t = if i == 0 { f64::NEG_INFINITY } else { edge(i as f64 - 0.5) };
            let hi_t = if i == last { f64::INFINITY } else { edge(i as f64 + 0.5) };
            let cdf = |x: f64| {
                if x == f64::INFINITY {
                    1.0
                } else if x == f64::NEG_INFINITY {
                    0.0
                } else {
                    bspline3_cdf(x)
                }
            };
            w[n] = cdf(hi_t) - cdf(lo_t);
            if let Some(d) = dw.as_deref_mut() {
                let k = |x: f64| if x.is_infinite() { 0.0 } else { bspline3(x) };
                d[n] = -inv_w * (k(hi_t) - k(lo_t)) * self.scale;
            }
        }
        (first, end - first + 1)
    }
}

/// Per-voxel bin weights of one image, flattened.
#[derive(Clone, Debug)]
pub(crate) struct Taps {
    stride: usize,
    first: Vec<u16>,
    count: Vec<u8>,
    w: Vec<f64>,
    dw: Vec<f64>,
}

impl Taps {
    pub(crate) fn compute(values: &[f64], binner: &Binner, with_deriv: bool) -> Self {
        let stride = binner.max_taps();
        let n = values.len();
        let mut first = Vec::with_capacity(n);
        let mut count = Vec::with_capacity(n);
        let mut w = vec![0.0; n * stride];
        let mut dw = if with_deriv { vec![0.0; n * stride] } else { Vec::new() };
        for (k, &v) in values.iter().enumerate() {
            let ws = &mut w[k * stride..(k + 1) * stride];
            let d = with_deriv.then(|| &mut dw[k * stride..(k + 1) * stride]);
            let (f, c) = binner.taps(v, ws, d);
            first.push(f as u16);
            count.push(c as u8);
        }
        Self { stride, first, count, w, dw }
    }

    #[inline]
    fn get(&self, k: usize) -> (usize, &[f64]) {
        let c = self.count[k] as usize;
        (self.first[k] as usize, &self.w[k * self.stride..k * self.stride + c])
    }

    #[inline]
    fn deriv(&self, k: usize) -> &[f64] {
        let c = self.count[k] as usize;
        &self.dw[k * self.stride..k * self.stride + c]
    }
}

fn joint_from_taps(
    bins: usize,
    fixed: &Taps,
    moving: &Taps,
    voxels: impl Iterator<Item = usize>,
) -> JointHistogram {
    let mut joint = vec![0.0; bins * bins];
    let mut n = 0usize;
    for k in voxels {
        n += 1;
        let (fi, fw) = fixed.get(k);
        let (mj, mw) = moving.get(k);
        for (a, &wa) in fw.iter().enumerate() {
            let row = &mut joint[(fi + a) * bins + mj..(fi + a) * bins + mj + mw.len()];
            for (cell, &wb) in row.iter_mut().zip(mw) {
                *cell += wa * wb;
            }
        }
    }
    let inv = 1.0 / n as f64;
    joint.iter_mut().for_each(|p| *p *= inv);
    JointHistogram::from_joint(bins, joint)
}

fn histogram_from_samples(
    x: &[f64],
    y: &[f64],
    cfg: &HistogramConfig,
    mode: BinningMode,
) -> Result<JointHistogram, MiError> {
    if x.len() != y.len() {
        return Err(MiError::LengthMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(MiError::Empty);
    }
    cfg.validate()?;
    let bx = Binner::new(cfg.bins, cfg.range_x, cfg.kernel_width, mode);
    let by = Binner::new(cfg.bins, cfg.range_y, cfg.kernel_width, mode);
    let tx = Taps::compute(x, &bx, false);
    let ty = Taps::compute(y, &by, false);
    Ok(joint_from_taps(cfg.bins, &tx, &ty, 0..x.len()))
}

/// Joint histogram with clamped linear binning: each sample pair lands in
/// exactly one cell.
pub fn hard_joint_histogram(
    x: &[f64],
    y: &[f64],
    cfg: &HistogramConfig,
) -> Result<JointHistogram, MiError> {
    histogram_from_samples(x, y, cfg, BinningMode::Hard)
}

/// Parzen-window joint histogram (bin-integrated cubic B-spline kernel).
pub fn soft_joint_histogram(
    x: &[f64],
    y: &[f64],
    cfg: &HistogramConfig,
) -> Result<JointHistogram, MiError> {
    histogram_from_samples(x, y, cfg, BinningMode::Soft)
}

/// Patch lattice over a volume. Corners start at 0 and advance by
/// `stride` while the whole patch fits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchGrid {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for PatchGrid {
    fn default() -> Self {
        Self { patch_size: [16; 3], stride: [8; 3] }
    }
}

/// One patch: voxel corner and extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchWindow {
    pub corner: [usize; 3],
    pub size: [usize; 3],
}

impl PatchWindow {
    pub fn center(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.corner[a] + self.size[a] / 2)
    }

    /// Linear voxel indices, x fastest.
    pub fn voxels(&self, dims: [usize; 3]) -> impl Iterator<Item = usize> + '_ {
        let [cx, cy, cz] = self.corner;
        let [sx, sy, sz] = self.size;
        (cz..cz + sz).flat_map(move |z| {
            (cy..cy + sy).flat_map(move |y| {
                let row = dims[0] * (y + dims[1] * z);
                (cx..cx + sx).map(move |x| row + x)
            })
        })
    }

    pub fn len(&self) -> usize {
        self.size.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PatchGrid {
    pub fn validate(&self) -> Result<(), MiError> {
        for a in 0..3 {
            if self.patch_size[a] == 0 || self.stride[a] == 0 {
                return Err(MiError::InvalidConfig("patch size and stride must be positive".into()));
            }
            if self.stride[a] > self.patch_size[a] {
                return Err(MiError::InvalidConfig("stride must not exceed patch size".into()));
            }
        }
        Ok(())
    }

    /// Same grid with the patch size clamped to `dims` (stride follows).
    pub fn fitted_to(&self, dims: [usize; 3]) -> Self {
        let patch_size = std::array::from_fn(|a| self.patch_size[a].min(dims[a]));
        let stride = std::array::from_fn(|a| self.stride[a].min(patch_size[a]));
        Self { patch_size, stride }
    }

    /// Windows in x-fastest order; with a restriction mask only windows
    /// whose center voxel lies inside it are kept.
    pub fn windows(&self, dims: [usize; 3], restriction: Option<&Mask>) -> Vec<PatchWindow> {
        let starts = |a: usize| -> Vec<usize> {
            if self.patch_size[a] > dims[a] {
                return Vec::new();
            }
            (0..=dims[a] - self.patch_size[a]).step_by(self.stride[a]).collect()
        };
        let (xs, ys, zs) = (starts(0), starts(1), starts(2));
        let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
        for &z in &zs {
            for &y in &ys {
                for &x in &xs {
                    let w = PatchWindow { corner: [x, y, z], size: self.patch_size };
                    let keep = restriction.is_none_or(|m| {
                        let [cx, cy, cz] = w.center();
                        m.contains(cx, cy, cz)
                    });
                    if keep {
                        out.push(w);
                    }
                }
            }
        }
        out
    }
}

/// Patch-local MI loss against a fixed image, with the fixed image's bin
/// weights cached so repeated evaluations only re-bin the moving image.
#[derive(Clone, Debug)]
pub struct PatchMi {
    dims: [usize; 3],
    cfg: HistogramConfig,
    mode: BinningMode,
    windows: Vec<PatchWindow>,
    fixed_taps: Taps,
    moving_binner: Binner,
}

impl PatchMi {
    pub fn new(
        fixed: &[f64],
        dims: [usize; 3],
        grid: &PatchGrid,
        restriction: Option<&Mask>,
        cfg: &HistogramConfig,
        mode: BinningMode,
    ) -> Result<Self, MiError> {
        cfg.validate()?;
        grid.validate()?;
        let n: usize = dims.iter().product();
        if fixed.len() != n {
            return Err(MiError::LengthMismatch(fixed.len(), n));
        }
        if let Some(m) = restriction {
            if m.dims() != dims {
                return Err(MiError::DimsMismatch(dims, m.dims()));
            }
        }
        let windows = grid.windows(dims, restriction);
        if windows.is_empty() {
            return Err(MiError::NoPatches);
        }
        let fixed_binner = Binner::new(cfg.bins, cfg.range_x, cfg.kernel_width, mode);
        Ok(Self {
            dims,
            cfg: *cfg,
            mode,
            windows,
            fixed_taps: Taps::compute(fixed, &fixed_binner, false),
            moving_binner: Binner::new(cfg.bins, cfg.range_y, cfg.kernel_width, mode),
        })
    }

    pub fn windows(&self) -> &[PatchWindow] {
        &self.windows
    }

    pub fn patch_count(&self) -> usize {
        self.windows.len()
    }

    fn check_len(&self, moving: &[f64]) -> Result<(), MiError> {
        let n = self.fixed_taps.count.len();
        if moving.len() != n {
            return Err(MiError::LengthMismatch(n, moving.len()));
        }
        Ok(())
    }

    /// Per-patch MI values in window order.
    pub fn patch_values(&self, moving: &[f64]) -> Result<Vec<f64>, MiError> {
        self.check_len(moving)?;
        let mt = Taps::compute(moving, &self.moving_binner, false);
        let values = self
            .windows
            .par_iter()
            .map(|w| {
                let h = joint_from_taps(self.cfg.bins, &self.fixed_taps, &mt, w.voxels(self.dims));
                local_mi(&h, self.cfg.epsilon)
            })
            .collect();
        Ok(values)
    }

    /// Mean MI over the patches, compensated and in window order.
    pub fn mean_mi(&self, moving: &[f64]) -> Result<f64, MiError> {
        let values = self.patch_values(moving)?;
        let mut acc = KahanSum::default();
        values.iter().for_each(|&v| acc.add(v));
        Ok(acc.value() / values.len() as f64)
    }

    /// `1 - mean MI` over the patches.
    pub fn loss(&self, moving: &[f64]) -> Result<f64, MiError> {
        Ok(1.0 - self.mean_mi(moving)?)
    }

    /// Loss and its derivative with respect to every moving voxel.
    pub fn gradient(&self, moving: &[f64]) -> Result<(f64, Vec<f64>), MiError> {
        if self.mode != BinningMode::Soft {
            return Err(MiError::HardGradient);
        }
        self.check_len(moving)?;
        let bins = self.cfg.bins;
        let eps = self.cfg.epsilon;
        let mt = Taps::compute(moving, &self.moving_binner, true);
        let mut grad = vec![0.0; moving.len()];
        let mut total = KahanSum::default();
        let scale = -1.0 / self.windows.len() as f64;
        let mut g = vec![0.0; bins * bins];
        let mut hy = vec![0.0; bins];
        for w in &self.windows {
            let h = joint_from_taps(bins, &self.fixed_taps, &mt, w.voxels(self.dims));
            total.add(local_mi(&h, eps));
            // dMI/dP(i,j) holding marginals fixed, and dMI/dPy(j)
            hy.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..bins {
                let px = h.marginal_x[i];
                for j in 0..bins {
                    let p = h.joint[i * bins + j];
                    let q = px * h.marginal_y[j] + eps;
                    g[i * bins + j] = (p + eps).ln() - q.ln() + p / (p + eps);
                    hy[j] -= p * px / q;
                }
            }
            // Px is unaffected by the moving image: its weights sum to one.
            let factor = scale / w.len() as f64;
            for k in w.voxels(self.dims) {
                let (fi, fw) = self.fixed_taps.get(k);
                let (mj, _) = mt.get(k);
                let dws = mt.deriv(k);
                let mut acc = 0.0;
                for (b, &dwb) in dws.iter().enumerate() {
                    if dwb == 0.0 {
                        continue;
                    }
                    let j = mj + b;
                    let mut c = hy[j];
                    for (a, &wa) in fw.iter().enumerate() {
                        c += wa * g[(fi + a) * bins + j];
                    }
                    acc += dwb * c;
                }
                grad[k] += factor * acc;
            }
        }
        Ok((1.0 - total.value() / self.windows.len() as f64, grad))
    }
}

/// Patch-local MI loss between two volumes of identical dimensions.
pub fn mi_loss(
    fixed: &Volume,
    moving: &Volume,
    grid: &PatchGrid,
    restriction: Option<&Mask>,
    cfg: &HistogramConfig,
    mode: BinningMode,
) -> Result<f64, MiError> {
    if fixed.dims() != moving.dims() {
        return Err(MiError::DimsMismatch(fixed.dims(), moving.dims()));
    }
    PatchMi::new(&fixed.to_f64(), fixed.dims(), grid, restriction, cfg, mode)?
        .loss(&moving.to_f64())
}

/// Analytic derivative of the soft-binned [`mi_loss`] with respect to each
/// moving voxel intensity.
pub fn mi_loss_gradient(
    fixed: &Volume,
    moving: &Volume,
    grid: &PatchGrid,
    restriction: Option<&Mask>,
    cfg: &HistogramConfig,
    mode: BinningMode,
) -> Result<Vec<f64>, MiError> {
    if mode != BinningMode::Soft {
        return Err(MiError::HardGradient);
    }
    if fixed.dims() != moving.dims() {
        return Err(MiError::DimsMismatch(fixed.dims(), moving.dims()));
    }
    let mi = PatchMi::new(&fixed.to_f64(), fixed.dims(), grid, restriction, cfg, mode)?;
    Ok(mi.gradient(&moving.to_f64())?.1)
}
