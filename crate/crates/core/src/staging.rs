//! Subject scores, piecewise probability mapping, threshold calibration and
//! stage decisions.
//!
//! A subject's score `s` is the fraction of its patches predicted
//! Stage-4-like. `y1` falls linearly from 1 at `s = 0` to 0.5 at `tau1` and
//! on to 0 at `s = 1`; `y4` rises from 0 through 0.5 at `tau2` to 1.
//! Decisions are strict: cirrhosis when `s > tau2`, substantial fibrosis
//! when `s > tau1`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clf::PatchPrediction;
use crate::imgcore::{ContrastMode, ImageError, Stage};

#[derive(Debug, thiserror::Error)]
pub enum StagingError {
    #[error("no patch predictions for subject")]
    Empty,
    #[error("predictions mix subjects {0} and {1}")]
    MixedSubjects(String, String),
    #[error("{0}")]
    Domain(String),
    #[error("every calibration fold was skipped: {0}")]
    AllFoldsSkipped(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub tau1: f64,
    pub tau2: f64,
    pub mode: ContrastMode,
}

impl Thresholds {
    pub fn new(tau1: f64, tau2: f64, mode: ContrastMode) -> Result<Self, StagingError> {
        let t = Self { tau1, tau2, mode };
        t.validate()?;
        Ok(t)
    }

    /// 0.37 / 0.66 without contrast, 0.35 / 0.70 with contrast.
    pub fn default_for(mode: ContrastMode) -> Self {
        match mode {
            ContrastMode::NonContrast => Self { tau1: 0.37, tau2: 0.66, mode },
            ContrastMode::Contrast => Self { tau1: 0.35, tau2: 0.70, mode },
        }
    }

    pub fn validate(&self) -> Result<(), StagingError> {
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(StagingError::Domain(format!("{name} = {t} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StagingError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| StagingError::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| ImageError::io(path, e).into())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StagingError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ImageError::io(path, e))?;
        let t: Self = serde_json::from_str(&text)
            .map_err(|e| StagingError::Format(format!("{}: {e}", path.display())))?;
        t.validate()?;
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub subject_id: String,
    pub n_patches: usize,
    pub s: f64,
    pub y1: f64,
    pub y4: f64,
    /// Cirrhosis (S4 vs S1-3).
    pub task1_positive: bool,
    /// Substantial fibrosis (S1 vs S2-4).
    pub task2_positive: bool,
}

fn check_domain(s: f64, tau: f64) -> Result<(), StagingError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(StagingError::Domain(format!("score {s} outside [0, 1]")));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(StagingError::Domain(format!("threshold {tau} outside (0, 1)")));
    }
    Ok(())
}

pub fn map_y1(s: f64, tau1: f64) -> Result<f64, StagingError> {
    check_domain(s, tau1)?;
    Ok(if s <= tau1 { 1.0 - 0.5 / tau1 * s } else { 0.5 - 0.5 * (s - tau1) / (1.0 - tau1) })
}

pub fn map_y4(s: f64, tau2: f64) -> Result<f64, StagingError> {
    check_domain(s, tau2)?;
    Ok(if s <= tau2 { 0.5 * s / tau2 } else { 0.5 + 0.5 * (s - tau2) / (1.0 - tau2) })
}

/// Fraction of positive patches. All predictions must share a subject.
pub fn subject_score(preds: &[PatchPrediction]) -> Result<f64, StagingError> {
    let first = preds.first().ok_or(StagingError::Empty)?;
    if let Some(other) = preds.iter().find(|p| p.subject_id != first.subject_id) {
        return Err(StagingError::MixedSubjects(first.subject_id.clone(), other.subject_id.clone()));
    }
    let positive = preds.iter().filter(|p| p.positive).count();
    Ok(positive as f64 / preds.len() as f64)
}

pub fn stage_subject(preds: &[PatchPrediction], t: &Thresholds) -> Result<StageResult, StagingError> {
    t.validate()?;
    let s = subject_score(preds)?;
    Ok(StageResult {
        subject_id: preds[0].subject_id.clone(),
        n_patches: preds.len(),
        s,
        y1: map_y1(s, t.tau1)?,
        y4: map_y4(s, t.tau2)?,
        task1_positive: s > t.tau2,
        task2_positive: s > t.tau1,
    })
}

/// Group predictions by subject (first-appearance order) and stage each.
pub fn stage_all(preds: &[PatchPrediction], t: &Thresholds) -> Result<Vec<StageResult>, StagingError> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: std::collections::HashMap<&str, Vec<PatchPrediction>> = Default::default();
    for p in preds {
        let g = groups.entry(p.subject_id.as_str()).or_insert_with(|| {
            order.push(p.subject_id.as_str());
            Vec::new()
        });
        g.push(p.clone());
    }
    order.iter().map(|id| stage_subject(&groups[id], t)).collect()
}

/// Threshold maximizing Youden's J for `positive(stage)` decided by
/// `s > tau`; ties go to the smaller threshold.
fn youden_threshold(data: &[(f64, Stage)], positive: impl Fn(Stage) -> bool, grid: &[f64]) -> f64 {
    let pos = data.iter().filter(|(_, st)| positive(*st)).count() as f64;
    let neg = data.len() as f64 - pos;
    let mut best = (f64::NEG_INFINITY, grid[0]);
    for &tau in grid {
        let tp = data.iter().filter(|(s, st)| positive(*st) && *s > tau).count() as f64;
        let tn = data.iter().filter(|(s, st)| !positive(*st) && *s <= tau).count() as f64;
        let j = tp / pos + tn / neg - 1.0;
        if j > best.0 {
            best = (j, tau);
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub thresholds: Thresholds,
    /// Per fold: fitted `(tau1, tau2)`, or the reason it was skipped.
    pub folds: Vec<Result<(f64, f64), String>>,
}

/// Cross-validated threshold calibration. Subjects are split into `folds`
/// stratified folds (round-robin within each stage, in input order); each
/// fold fits both thresholds by Youden's J on the remaining folds over the
/// grid `{step, 2 step, ..} < 1`. A fold whose training part lacks a class
/// for either task is skipped. The result is the mean over fitted folds.
pub fn calibrate(
    val: &[(f64, Stage)],
    folds: usize,
    grid_step: f64,
    mode: ContrastMode,
) -> Result<Calibration, StagingError> {
    if folds < 2 {
        return Err(StagingError::Domain("at least two folds are required".into()));
    }
    if !(grid_step > 0.0 && grid_step < 0.5) {
        return Err(StagingError::Domain(format!("grid_step {grid_step} outside (0, 0.5)")));
    }
    if let Some((s, _)) = val.iter().find(|(s, _)| !(0.0..=1.0).contains(s)) {
        return Err(StagingError::Domain(format!("score {s} outside [0, 1]")));
    }
    let n_grid = ((1.0 / grid_step) - 1e-9).floor() as usize;
    let grid: Vec<f64> = (1..=n_grid).map(|k| k as f64 * grid_step).filter(|&t| t < 1.0).collect();

    let mut fold_of = vec![0usize; val.len()];
    let mut seen = [0usize; 4];
    for (i, (_, st)) in val.iter().enumerate() {
        let k = st.get() as usize - 1;
        fold_of[i] = seen[k] % folds;
        seen[k] += 1;
    }

    let mut results = Vec::with_capacity(folds);
    for f in 0..folds {
        let train: Vec<(f64, Stage)> =
            val.iter().zip(&fold_of).filter(|(_, &k)| k != f).map(|(v, _)| *v).collect();
        let has = |pred: &dyn Fn(Stage) -> bool| train.iter().any(|(_, st)| pred(*st));
        let s1 = has(&|st| st.get() == 1);
        let s234 = has(&|st| st.get() > 1);
        let s4 = has(&|st| st.get() == 4);
        let s123 = has(&|st| st.get() < 4);
        if !(s1 && s234 && s4 && s123) {
            let msg = format!("fold {f}: training part lacks a class");
            log::warn!("{msg}");
            results.push(Err(msg));
            continue;
        }
        let t1 = youden_threshold(&train, Stage::is_substantial, &grid);
        let t2 = youden_threshold(&train, Stage::is_cirrhosis, &grid);
        results.push(Ok((t1, t2)));
    }
    let fitted: Vec<(f64, f64)> = results.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    if fitted.is_empty() {
        let reasons: Vec<&str> = results.iter().filter_map(|r| r.as_ref().err().map(String::as_str)).collect();
        return Err(StagingError::AllFoldsSkipped(reasons.join("; ")));
    }
    let n = fitted.len() as f64;
    let tau1 = fitted.iter().map(|t| t.0).sum::<f64>() / n;
    let tau2 = fitted.iter().map(|t| t.1).sum::<f64>() / n;
    Ok(Calibration { thresholds: Thresholds::new(tau1, tau2, mode)?, folds: results })
}

/// Calibrated thresholds, or the mode's defaults when every fold is
/// skipped.
pub fn calibrate_or_default(
    val: &[(f64, Stage)],
    folds: usize,
    grid_step: f64,
    mode: ContrastMode,
) -> Result<Thresholds, StagingError> {
    match calibrate(val, folds, grid_step, mode) {
        Ok(c) => Ok(c.thresholds),
        Err(StagingError::AllFoldsSkipped(why)) => {
            log::warn!("calibration skipped ({why}); using defaults");
            Ok(Thresholds::default_for(mode))
        }
        Err(e) => Err(e),
    }
}

pub fn write_report(path: impl AsRef<Path>, results: &[StageResult]) -> Result<(), StagingError> {
    let path = path.as_ref();
    let err = |e: csv::Error| StagingError::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["subject_id", "n_patches", "s", "y1", "y4", "task1", "task2"]).map_err(err)?;
    for r in results {
        w.write_record([
            r.subject_id.clone(),
            r.n_patches.to_string(),
            format!("{:.17}", r.s),
            format!("{:.17}", r.y1),
            format!("{:.17}", r.y4),
            u8::from(r.task1_positive).to_string(),
            u8::from(r.task2_positive).to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| ImageError::io(path, e).into())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<StageResult>, StagingError> {
    let path = path.as_ref();
    let err = |e: csv::Error| StagingError::Format(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        let field = |i: usize| rec.get(i).ok_or_else(|| StagingError::Format("short row".into()));
        let num = |i: usize| -> Result<f64, StagingError> {
            field(i)?.parse().map_err(|_| StagingError::Format(format!("bad number {:?}", rec.get(i))))
        };
        let flag = |i: usize| -> Result<bool, StagingError> {
            match field(i)? {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(StagingError::Format(format!("bad flag {other:?}"))),
            }
        };
        out.push(StageResult {
            subject_id: field(0)?.to_string(),
            n_patches: field(1)?.parse().map_err(|_| StagingError::Format("bad n_patches".into()))?,
            s: num(2)?,
            y1: num(3)?,
            y4: num(4)?,
            task1_positive: flag(5)?,
            task2_positive: flag(6)?,
        });
    }
    Ok(out)
}
