//! Rigid multi-modal registration, resampling and mask propagation.
//!
//! [`register_rigid`] minimizes a patch-local similarity loss between the
//! fixed image and the moving image resampled through a rigid transform.
//! The optimizer runs coarse to fine over a mean-pooled pyramid. At each
//! level the gradient with respect to the six transform parameters is
//! taken by central differences and a normalized step is taken along it,
//! shrinking the step until the loss decreases.

mod resample;
mod similarity;
mod transform;

use serde::{Deserialize, Serialize};

use crate::imgcore::{Mask, Volume};
use crate::mi::{intensity_range, HistogramConfig, MiError, PatchGrid};

pub use resample::{downsample_mask, downsample_mean, resample_linear, resample_nearest};
pub use similarity::{PatchNcc, Similarity, SimilarityKind};
pub use transform::RigidTransform;

#[derive(Debug, thiserror::Error)]
pub enum RegError {
    #[error("no patches in the overlap region: {0}")]
    NoOverlap(MiError),
    #[error(transparent)]
    Similarity(MiError),
    #[error("invalid registration configuration: {0}")]
    InvalidConfig(String),
    #[error("transform file: {0}")]
    Transform(String),
}

impl From<MiError> for RegError {
    fn from(e: MiError) -> Self {
        match e {
            MiError::NoPatches => RegError::NoOverlap(e),
            e => RegError::Similarity(e),
        }
    }
}

/// One pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    pub factor: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    /// Coarse to fine; factors must be strictly descending.
    pub levels: Vec<Level>,
    /// Initial step length in units of the level's mean voxel spacing.
    pub step_init: f64,
    /// Factor applied to the step after a rejected move, in (0, 1).
    pub step_shrink: f64,
    /// A level stops when the step falls below this many voxel spacings.
    pub min_step: f64,
    /// A level stops when an accepted move improves the loss by less than
    /// this relative amount.
    pub converge_tol: f64,
    pub hist: HistogramConfig,
    pub grid: PatchGrid,
    pub metric: SimilarityKind,
    /// Derive histogram ranges from robust image percentiles.
    pub auto_range: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            levels: vec![
                Level { factor: 4, iterations: 100 },
                Level { factor: 2, iterations: 100 },
                Level { factor: 1, iterations: 50 },
            ],
            step_init: 1.0,
            step_shrink: 0.5,
            min_step: 0.01,
            converge_tol: 1e-6,
            hist: HistogramConfig::default(),
            grid: PatchGrid::default(),
            metric: SimilarityKind::Mi,
            auto_range: true,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegError> {
        let bad = |m: &str| Err(RegError::InvalidConfig(m.into()));
        if self.levels.is_empty() {
            return bad("at least one level is required");
        }
        if self.levels.iter().any(|l| l.factor == 0) {
            return bad("level factors must be positive");
        }
        if self.levels.windows(2).any(|w| w[1].factor >= w[0].factor) {
            return bad("level factors must be strictly descending");
        }
        if !(self.step_init > 0.0) || !(self.min_step > 0.0) || !(self.converge_tol > 0.0) {
            return bad("step and tolerance parameters must be positive");
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return bad("step_shrink must lie in (0, 1)");
        }
        self.grid.validate()?;
        if !self.auto_range {
            self.hist.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegStatus {
    Converged,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub factor: usize,
    pub iterations: usize,
    pub start_loss: f64,
    pub final_loss: f64,
    pub status: RegStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// Loss at full resolution for `transform`.
    pub loss: f64,
    /// Loss at full resolution for the identity.
    pub identity_loss: f64,
    pub iterations: usize,
    pub levels: Vec<LevelReport>,
    /// Set when the final level ended where no accepted step could reduce
    /// the loss, or when the coarse levels were discarded.
    pub warnings: Vec<String>,
}

/// Loss of `moving` resampled through `t` on a fixed level.
struct Objective<'a> {
    fixed_geom: crate::imgcore::Geometry,
    moving: &'a Volume,
    metric: Box<dyn Similarity>,
}

impl Objective<'_> {
    fn eval(&self, t: &RigidTransform) -> Result<f64, RegError> {
        let resampled = resample::resample_linear_f64(self.moving, t, &self.fixed_geom);
        Ok(self.metric.loss(&resampled)?)
    }
}

fn mean(v: [f64; 3]) -> f64 {
    (v[0] + v[1] + v[2]) / 3.0
}

/// Characteristic lever arm (mm) converting radians into millimetres, so
/// rotation and translation steps are commensurate.
fn lever_arm(fixed: &Volume) -> f64 {
    mean(fixed.geometry().extent()) / 4.0
}

struct LevelOutcome {
    params: [f64; 6],
    report: LevelReport,
    moved: bool,
}

fn optimize_level(
    objective: &Objective,
    start: [f64; 6],
    start_loss: f64,
    center: [f64; 3],
    cfg: &RegistrationConfig,
    level: Level,
    spacing: f64,
    arm: f64,
) -> Result<LevelOutcome, RegError> {
    let fd_step = [1e-3, 1e-3, 1e-3, 0.1 * spacing, 0.1 * spacing, 0.1 * spacing];
    // millimetres per parameter unit
    let unit = [arm, arm, arm, 1.0, 1.0, 1.0];
    let at = |p: [f64; 6]| RigidTransform::from_params(p, center);

    let mut params = start;
    let mut loss = start_loss;
    let mut step = cfg.step_init * spacing;
    let min_step = cfg.min_step * spacing;
    let mut status = RegStatus::MaxIterations;
    let mut iterations = 0;
    let mut moved = false;

    while iterations < level.iterations {
        iterations += 1;
        let mut grad = [0.0; 6];
        for k in 0..6 {
            let mut up = params;
            let mut down = params;
            up[k] += fd_step[k];
            down[k] -= fd_step[k];
            let d = objective.eval(&at(up))? - objective.eval(&at(down))?;
            // gradient in millimetre-scaled coordinates
            grad[k] = d / (2.0 * fd_step[k]) / unit[k];
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            status = RegStatus::Converged;
            break;
        }
        let mut accepted = None;
        while step >= min_step {
            let cand: [f64; 6] = std::array::from_fn(|k| params[k] - step * grad[k] / norm / unit[k]);
            let l = objective.eval(&at(cand))?;
            if l < loss {
                accepted = Some((cand, l));
                break;
            }
            step *= cfg.step_shrink;
        }
        let Some((cand, l)) = accepted else {
            status = RegStatus::Converged;
            break;
        };
        let rel = (loss - l) / loss.abs().max(1e-12);
        params = cand;
        loss = l;
        moved = true;
        if rel < cfg.converge_tol {
            status = RegStatus::Converged;
            break;
        }
    }
    Ok(LevelOutcome {
        params,
        report: LevelReport { factor: level.factor, iterations, start_loss, final_loss: loss, status },
        moved,
    })
}

/// Register `moving` to `fixed` with a rigid transform.
///
/// The returned transform maps fixed-grid world points into the moving
/// image, so `resample_linear(moving, &result.transform, fixed.geometry())`
/// is the aligned moving image. The rotation center is the fixed image's
/// physical center. When `fixed_mask` is given only patches centred inside
/// it contribute. Deterministic for fixed inputs and configuration.
pub fn register_rigid(
    fixed: &Volume,
    moving: &Volume,
    cfg: &RegistrationConfig,
    fixed_mask: Option<&Mask>,
) -> Result<RegistrationResult, RegError> {
    cfg.validate()?;
    if let Some(m) = fixed_mask {
        if m.dims() != fixed.dims() {
            return Err(RegError::InvalidConfig(format!(
                "fixed mask dims {:?} differ from fixed image {:?}",
                m.dims(),
                fixed.dims()
            )));
        }
    }
    let hist = if cfg.auto_range {
        HistogramConfig {
            range_x: intensity_range(fixed, fixed_mask),
            range_y: intensity_range(moving, None),
            ..cfg.hist
        }
    } else {
        cfg.hist
    };
    let center = fixed.geometry().center();
    let arm = lever_arm(fixed);

    let mut params = [0.0; 6];
    let mut reports = Vec::with_capacity(cfg.levels.len());
    let mut warnings = Vec::new();
    let mut total_iterations = 0;
    let last = cfg.levels.len() - 1;
    let mut final_loss = f64::NAN;
    let mut identity_loss = f64::NAN;

    for (li, &level) in cfg.levels.iter().enumerate() {
        let f_level = resample::downsample_mean(fixed, level.factor);
        let m_level = resample::downsample_mean(moving, level.factor);
        let mask_level = fixed_mask.map(|m| resample::downsample_mask(m, level.factor));
        let grid = cfg.grid.fitted_to(f_level.dims());
        let metric = similarity::build(
            cfg.metric,
            &f_level.to_f64(),
            f_level.dims(),
            &grid,
            mask_level.as_ref(),
            &hist,
        )?;
        let objective = Objective { fixed_geom: *f_level.geometry(), moving: &m_level, metric };
        let mut start_loss = objective.eval(&RigidTransform::from_params(params, center))?;

        if li == last {
            identity_loss = objective.eval(&RigidTransform::with_center(center))?;
            if identity_loss < start_loss {
                warnings.push(
                    "coarse levels ended worse than identity; final level restarted from identity"
                        .into(),
                );
                params = [0.0; 6];
                start_loss = identity_loss;
            }
        }

        let out = optimize_level(
            &objective,
            params,
            start_loss,
            center,
            cfg,
            level,
            mean(f_level.spacing()),
            arm,
        )?;
        log::debug!(
            "level {}x: {} iterations, loss {:.6} -> {:.6}",
            level.factor,
            out.report.iterations,
            out.report.start_loss,
            out.report.final_loss
        );
        total_iterations += out.report.iterations;
        params = out.params;
        if li == last {
            final_loss = out.report.final_loss;
            if !out.moved && out.report.iterations <= 1 && level.iterations > 0 {
                warnings.push("final level made no progress at minimum step".into());
            }
        }
        reports.push(out.report);
    }

    Ok(RegistrationResult {
        transform: RigidTransform::from_params(params, center),
        loss: final_loss,
        identity_loss,
        iterations: total_iterations,
        levels: reports,
        warnings,
    })
}
