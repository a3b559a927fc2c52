//! Segmentation and classification metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::imgcore::{ImageError, Mask, Stage};
use crate::staging::StageResult;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("masks have different geometry")]
    GeometryMismatch,
    #[error("Hausdorff distance needs two nonempty masks")]
    EmptyMask,
    #[error("AUC needs both classes")]
    SingleClass,
    #[error("no decisions to score")]
    Empty,
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub dice: f64,
    /// mm
    pub hd: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsScore {
    pub auc: f64,
    pub acc: f64,
}

fn same_geometry(a: &Mask, b: &Mask) -> Result<(), MetricError> {
    if a.geometry() != b.geometry() {
        return Err(MetricError::GeometryMismatch);
    }
    Ok(())
}

/// `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64, MetricError> {
    same_geometry(a, b)?;
    let inter = a.data().iter().zip(b.data()).filter(|(&x, &y)| x == 1 && y == 1).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mask voxels with at least one face neighbour outside the mask or the
/// grid.
pub fn boundary(m: &Mask) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = m.dims();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.contains(x, y, z) {
                    continue;
                }
                let edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                if edge
                    || !m.contains(x - 1, y, z)
                    || !m.contains(x + 1, y, z)
                    || !m.contains(x, y - 1, z)
                    || !m.contains(x, y + 1, z)
                    || !m.contains(x, y, z - 1)
                    || !m.contains(x, y, z + 1)
                {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// One pass of the lower-envelope distance transform: `d[q] = min_p
/// w (q - p)^2 + f[p]`. Infinite entries of `f` are not sites.
fn edt_1d(f: &[f64], w: f64, d: &mut [f64], v: &mut Vec<usize>, zs: &mut Vec<f64>) {
    v.clear();
    zs.clear();
    let n = f.len();
    let meet = |q: usize, p: usize| {
        let (q, p) = (q as f64, p as f64);
        ((f[q as usize] + w * q * q) - (f[p as usize] + w * p * p)) / (2.0 * w * (q - p))
    };
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        while let Some(&p) = v.last() {
            let s = meet(q, p);
            if s <= *zs.last().expect("paired with v") {
                v.pop();
                zs.pop();
            } else {
                break;
            }
        }
        let s = match v.last() {
            Some(&p) => meet(q, p),
            None => f64::NEG_INFINITY,
        };
        v.push(q);
        zs.push(s);
    }
    if v.is_empty() {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while k + 1 < v.len() && zs[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dx = q as f64 - p as f64;
        *dq = w * dx * dx + f[p];
    }
}

/// Squared Euclidean distance (mm^2) from every voxel to the nearest site.
fn squared_edt(dims: [usize; 3], spacing: [f64; 3], sites: &[[usize; 3]]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut g = vec![f64::INFINITY; nx * ny * nz];
    for &[x, y, z] in sites {
        g[idx(x, y, z)] = 0.0;
    }
    let (mut v, mut zs) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let w = spacing[axis] * spacing[axis];
        let (mut f, mut d) = (vec![0.0; n], vec![0.0; n]);
        let lines: Vec<(usize, usize)> = match axis {
            0 => (0..nz).flat_map(|z| (0..ny).map(move |y| (y, z))).collect(),
            1 => (0..nz).flat_map(|z| (0..nx).map(move |x| (x, z))).collect(),
            _ => (0..ny).flat_map(|y| (0..nx).map(move |x| (x, y))).collect(),
        };
        for (a, b) in lines {
            let at = |i: usize| match axis {
                0 => idx(i, a, b),
                1 => idx(a, i, b),
                _ => idx(a, b, i),
            };
            for i in 0..n {
                f[i] = g[at(i)];
            }
            edt_1d(&f, w, &mut d, &mut v, &mut zs);
            for i in 0..n {
                g[at(i)] = d[i];
            }
        }
    }
    g
}

/// Symmetric Hausdorff distance between the boundary voxel centers, in mm.
pub fn hausdorff(a: &Mask, b: &Mask) -> Result<f64, MetricError> {
    same_geometry(a, b)?;
    if a.is_empty_mask() || b.is_empty_mask() {
        return Err(MetricError::EmptyMask);
    }
    let g = a.geometry();
    let (ba, bb) = (boundary(a), boundary(b));
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let dt = squared_edt(g.dims, g.spacing, to);
        from.iter().map(|&[x, y, z]| dt[g.index(x, y, z)]).fold(0.0, f64::max).sqrt()
    };
    Ok(directed(&ba, &bb).max(directed(&bb, &ba)))
}

pub fn segmentation_score(pred: &Mask, truth: &Mask) -> Result<SegScore, MetricError> {
    Ok(SegScore { dice: dice(pred, truth)?, hd: hausdorff(pred, truth)? })
}

/// Mann-Whitney AUC: `(wins + ties / 2) / (n_pos n_neg)` over cross-class
/// pairs.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64, MetricError> {
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (n_pos, n_neg) = sorted.iter().fold((0u64, 0u64), |(p, n), s| if s.1 { (p + 1, n) } else { (p, n + 1) });
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let (mut wins, mut ties, mut neg_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let pos = sorted[i..j].iter().filter(|s| s.1).count() as u64;
        let neg = (j - i) as u64 - pos;
        wins += pos * neg_below;
        ties += pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (n_pos as f64 * n_neg as f64))
}

pub fn accuracy(decisions: &[(bool, bool)]) -> Result<f64, MetricError> {
    if decisions.is_empty() {
        return Err(MetricError::Empty);
    }
    let ok = decisions.iter().filter(|(p, t)| p == t).count();
    Ok(ok as f64 / decisions.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectEval {
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y4: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_subject: Vec<SubjectEval>,
    pub mean_dice: Option<f64>,
    pub mean_hd: Option<f64>,
    pub auc_task1: Option<f64>,
    pub acc_task1: Option<f64>,
    pub auc_task2: Option<f64>,
    pub acc_task2: Option<f64>,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MetricError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| MetricError::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| ImageError::io(path, e).into())
    }
}

/// Segmentation report over `(subject, prediction, truth)` triples.
pub fn segmentation_report(cases: &[(String, &Mask, &Mask)]) -> Result<EvalReport, MetricError> {
    let mut per_subject = Vec::with_capacity(cases.len());
    for (id, p, t) in cases {
        let sc = segmentation_score(p, t)?;
        per_subject.push(SubjectEval { subject_id: id.clone(), dice: Some(sc.dice), hd: Some(sc.hd), ..Default::default() });
    }
    let mean = |f: fn(&SubjectEval) -> Option<f64>| {
        (!per_subject.is_empty()).then(|| per_subject.iter().filter_map(f).sum::<f64>() / per_subject.len() as f64)
    };
    let mean_dice = mean(|s| s.dice);
    let mean_hd = mean(|s| s.hd);
    Ok(EvalReport { per_subject, mean_dice, mean_hd, ..Default::default() })
}

/// Task 1 (S4 vs S1-3) is scored by `y4`; task 2 (S2-4 vs S1) by `1 - y1`.
/// A task's AUC is absent when only one class is present.
pub fn classification_report(results: &[(StageResult, Stage)]) -> Result<EvalReport, MetricError> {
    if results.is_empty() {
        return Err(MetricError::Empty);
    }
    let t1: Vec<(f64, bool)> = results.iter().map(|(r, st)| (r.y4, st.is_cirrhosis())).collect();
    let t2: Vec<(f64, bool)> = results.iter().map(|(r, st)| (1.0 - r.y1, st.is_substantial())).collect();
    let d1: Vec<(bool, bool)> = results.iter().map(|(r, st)| (r.task1_positive, st.is_cirrhosis())).collect();
    let d2: Vec<(bool, bool)> = results.iter().map(|(r, st)| (r.task2_positive, st.is_substantial())).collect();
    let optional = |r: Result<f64, MetricError>| match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::SingleClass) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(EvalReport {
        per_subject: results
            .iter()
            .map(|(r, st)| SubjectEval {
                subject_id: r.subject_id.clone(),
                stage: Some(st.get()),
                s: Some(r.s),
                y1: Some(r.y1),
                y4: Some(r.y4),
                ..Default::default()
            })
            .collect(),
        auc_task1: optional(auc(&t1))?,
        acc_task1: Some(accuracy(&d1)?),
        auc_task2: optional(auc(&t2))?,
        acc_task2: Some(accuracy(&d2)?),
        ..Default::default()
    })
}

/// Brute-force reference implementations used as test oracles.
pub mod oracle {
    use super::*;

    pub fn dice(a: &Mask, b: &Mask) -> f64 {
        let (mut ia, mut ib, mut both) = (0usize, 0usize, 0usize);
        for i in 0..a.data().len() {
            let (x, y) = (a.contains_index(i), b.contains_index(i));
            ia += x as usize;
            ib += y as usize;
            both += (x && y) as usize;
        }
        if ia + ib == 0 {
            1.0
        } else {
            2.0 * both as f64 / (ia + ib) as f64
        }
    }

    /// All-pairs directed max-min over boundary voxel centers.
    pub fn hausdorff(a: &Mask, b: &Mask) -> f64 {
        let s = a.geometry().spacing;
        let (ba, bb) = (boundary(a), boundary(b));
        let d2 = |p: [usize; 3], q: [usize; 3]| -> f64 {
            (0..3).map(|k| {
                let d = p[k] as f64 - q[k] as f64;
                s[k] * s[k] * d * d
            })
            .sum()
        };
        let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
            from.iter()
                .map(|&p| to.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max)
        };
        directed(&ba, &bb).max(directed(&bb, &ba)).sqrt()
    }

    pub fn auc(scores: &[(f64, bool)]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for &(sp, p) in scores {
            if !p {
                continue;
            }
            for &(sn, n) in scores {
                if n {
                    continue;
                }
                den += 1.0;
                if sp > sn {
                    num += 1.0;
                } else if sp == sn {
                    num += 0.5;
                }
            }
        }
        num / den
    }
}
