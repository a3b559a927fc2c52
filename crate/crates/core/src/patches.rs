//! Multi-channel 2-D axial patches from the masked organ.
//!
//! Each channel is multiplied by the organ mask and z-scored with statistics
//! taken over the mask, so voxels outside the mask stay exactly 0. Absent
//! modalities give all-zero channels.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::imgcore::{ContrastMode, ImageError, Mask, Modality, Study, Volume};

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("subject {0}: no organ mask")]
    NoMask(String),
    #[error("subject {0}: organ mask is empty")]
    EmptyMask(String),
    #[error("subject {subject}: {what} geometry differs from GED4")]
    GeometryMismatch { subject: String, what: String },
    #[error("subject {0}: stage label required for training")]
    MissingStage(String),
    #[error("invalid patch configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("patch dataset: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityNorm {
    /// Per-channel z-score with mean and deviation over the organ mask.
    #[default]
    ZScoreMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchExtractionConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub min_coverage: f64,
    pub intensity_norm: IntensityNorm,
}

impl Default for PatchExtractionConfig {
    fn default() -> Self {
        Self { patch_size: 16, stride: 8, min_coverage: 0.5, intensity_norm: IntensityNorm::ZScoreMask }
    }
}

impl PatchExtractionConfig {
    pub fn validate(&self) -> Result<(), PatchError> {
        let bad = |m: &str| Err(PatchError::InvalidConfig(m.into()));
        if self.patch_size == 0 || self.stride == 0 {
            return bad("patch_size and stride must be positive");
        }
        if self.stride > self.patch_size {
            return bad("stride must not exceed patch_size");
        }
        if !(self.min_coverage > 0.0 && self.min_coverage <= 1.0) {
            return bad("min_coverage must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Geometric augmentation of a square patch, applied to every channel and
/// to the patch mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    FlipX,
    FlipY,
    Rot90,
    Rot180,
    Rot270,
}

impl Augment {
    pub const ALL: [Augment; 5] =
        [Augment::FlipX, Augment::FlipY, Augment::Rot90, Augment::Rot180, Augment::Rot270];

    /// Source `(row, col)` for destination `(row, col)` in an `s`-square.
    fn source(self, r: usize, c: usize, s: usize) -> (usize, usize) {
        let m = s - 1;
        match self {
            Augment::FlipX => (r, m - c),
            Augment::FlipY => (m - r, c),
            // counter-clockwise quarter turn
            Augment::Rot90 => (c, m - r),
            Augment::Rot180 => (m - r, m - c),
            Augment::Rot270 => (m - c, r),
        }
    }

    pub fn apply_plane<T: Copy>(self, plane: &[T], s: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(s * s);
        for r in 0..s {
            for c in 0..s {
                let (sr, sc) = self.source(r, c, s);
                out.push(plane[sr * s + sc]);
            }
        }
        out
    }
}

/// One `K x S x S` patch. `data` is channel-major, then row (y), then
/// column (x).
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub subject_id: String,
    pub slice_index: usize,
    /// Window corner `(x, y)` in voxels.
    pub grid_xy: [usize; 2],
    pub data: Vec<f32>,
    /// `S x S`, 1 inside the organ.
    pub mask: Vec<u8>,
    pub coverage: f64,
    pub label: Option<u8>,
    pub augment: Option<Augment>,
}

impl Patch {
    pub fn channel(&self, k: usize, s: usize) -> &[f32] {
        &self.data[k * s * s..(k + 1) * s * s]
    }

    pub fn augmented(&self, a: Augment, s: usize) -> Patch {
        let k = self.data.len() / (s * s);
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..k {
            data.extend(a.apply_plane(self.channel(c, s), s));
        }
        Patch { data, mask: a.apply_plane(&self.mask, s), augment: Some(a), ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub channels: Vec<Modality>,
    pub patch_size: usize,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Channel multiplied by the mask and z-scored over it; 0 outside.
fn normalize(v: &Volume, mask: &Mask) -> Vec<f32> {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for (i, &x) in v.data().iter().enumerate() {
        if mask.contains_index(i) {
            n += 1;
            sum += x as f64;
        }
    }
    let mean = sum / n as f64;
    let var = v
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.contains_index(*i))
        .map(|(_, &x)| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    v.data()
        .iter()
        .enumerate()
        .map(|(i, &x)| if mask.contains_index(i) { ((x as f64 - mean) / sd) as f32 } else { 0.0 })
        .collect()
}

/// Lattice starts along one axis: from `first` in steps of `stride`, while
/// the window start stays within the mask extent and the window fits.
fn lattice(first: usize, last: usize, size: usize, stride: usize, n: usize) -> Vec<usize> {
    (first..=last).step_by(stride).take_while(|&s| s + size <= n).collect()
}

/// Cut patches from an aligned study. Channel order follows `mode`.
pub fn extract_patches(
    study: &Study,
    mode: ContrastMode,
    cfg: &PatchExtractionConfig,
) -> Result<Vec<Patch>, PatchError> {
    cfg.validate()?;
    let id = &study.subject_id;
    let mask = study.mask.as_ref().ok_or_else(|| PatchError::NoMask(id.clone()))?;
    let g = *study.reference().geometry();
    if *mask.geometry() != g {
        return Err(PatchError::GeometryMismatch { subject: id.clone(), what: "mask".into() });
    }
    for (m, v) in &study.modalities {
        if *v.geometry() != g {
            return Err(PatchError::GeometryMismatch { subject: id.clone(), what: m.to_string() });
        }
    }
    let Some((lo, hi)) = mask.bounding_box() else {
        return Err(PatchError::EmptyMask(id.clone()));
    };
    let channels: Vec<Option<Vec<f32>>> =
        mode.channels().iter().map(|m| study.get(*m).map(|v| normalize(v, mask))).collect();

    let s = cfg.patch_size;
    let [nx, ny, _] = g.dims;
    let xs = lattice(lo[0], hi[0], s, cfg.stride, nx);
    let ys = lattice(lo[1], hi[1], s, cfg.stride, ny);
    let mut out = Vec::new();
    for z in lo[2]..=hi[2] {
        for &y0 in &ys {
            for &x0 in &xs {
                let mut pm = Vec::with_capacity(s * s);
                for dy in 0..s {
                    for dx in 0..s {
                        pm.push(u8::from(mask.contains(x0 + dx, y0 + dy, z)));
                    }
                }
                let inside = pm.iter().filter(|&&v| v == 1).count();
                let coverage = inside as f64 / (s * s) as f64;
                if inside == 0 || coverage < cfg.min_coverage {
                    continue;
                }
                let mut data = Vec::with_capacity(channels.len() * s * s);
                for ch in &channels {
                    match ch {
                        Some(values) => {
                            for dy in 0..s {
                                let row = g.index(x0, y0 + dy, z);
                                data.extend_from_slice(&values[row..row + s]);
                            }
                        }
                        None => data.extend(std::iter::repeat_n(0.0f32, s * s)),
                    }
                }
                out.push(Patch {
                    subject_id: id.clone(),
                    slice_index: z,
                    grid_xy: [x0, y0],
                    data,
                    mask: pm,
                    coverage,
                    label: None,
                    augment: None,
                });
            }
        }
    }
    Ok(out)
}

/// Labeled patches from stage-1 (label 0) and stage-4 (label 1) subjects,
/// with the minority class augmented until the counts are within 5%.
/// Stage-2 and stage-3 subjects are skipped.
pub fn build_training_set(
    studies: &[Study],
    mode: ContrastMode,
    cfg: &PatchExtractionConfig,
) -> Result<PatchSet, PatchError> {
    cfg.validate()?;
    let mut by_class: [Vec<Patch>; 2] = [Vec::new(), Vec::new()];
    for st in studies {
        let stage = st.stage.ok_or_else(|| PatchError::MissingStage(st.subject_id.clone()))?;
        let label = match stage.get() {
            1 => 0u8,
            4 => 1u8,
            _ => continue,
        };
        for mut p in extract_patches(st, mode, cfg)? {
            p.label = Some(label);
            by_class[label as usize].push(p);
        }
    }
    balance(&mut by_class, cfg.patch_size);
    let [neg, pos] = by_class;
    Ok(PatchSet {
        channels: mode.channels().to_vec(),
        patch_size: cfg.patch_size,
        patches: neg.into_iter().chain(pos).collect(),
    })
}

fn balance(classes: &mut [Vec<Patch>; 2], s: usize) {
    let (minor, major) = if classes[0].len() < classes[1].len() { (0, 1) } else { (1, 0) };
    let n = classes[minor].len();
    let target = classes[major].len();
    if n == 0 {
        return;
    }
    let mut k = 0;
    while (classes[minor].len() as f64) < 0.95 * target as f64 {
        let a = Augment::ALL[(k / n) % Augment::ALL.len()];
        let copy = classes[minor][k % n].augmented(a, s);
        classes[minor].push(copy);
        k += 1;
    }
}

const MAGIC: &[u8; 8] = b"FIBPTCH1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    count: usize,
    k: usize,
    s: usize,
    channels: Vec<Modality>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexRecord {
    subject_id: String,
    z: usize,
    y: usize,
    x: usize,
    coverage: f64,
    label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    augment: Option<Augment>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PatchError + '_ {
    move |e| PatchError::Image(ImageError::io(path, e))
}

/// Binary patch dataset: magic, length-prefixed JSON header, float32
/// tensors, uint8 patch masks, then a length-prefixed JSON index.
pub fn write_patch_set(set: &PatchSet, path: impl AsRef<Path>) -> Result<(), PatchError> {
    let path = path.as_ref();
    let err = io_err(path);
    let (k, s) = (set.channels.len(), set.patch_size);
    for p in &set.patches {
        if p.data.len() != k * s * s || p.mask.len() != s * s {
            return Err(PatchError::Format(format!("patch from {} has the wrong shape", p.subject_id)));
        }
    }
    let header = serde_json::to_vec(&Header { count: set.len(), k, s, channels: set.channels.clone() })
        .map_err(|e| PatchError::Format(e.to_string()))?;
    let index: Vec<IndexRecord> = set
        .patches
        .iter()
        .map(|p| IndexRecord {
            subject_id: p.subject_id.clone(),
            z: p.slice_index,
            y: p.grid_xy[1],
            x: p.grid_xy[0],
            coverage: p.coverage,
            label: p.label,
            augment: p.augment,
        })
        .collect();
    let index = serde_json::to_vec(&index).map_err(|e| PatchError::Format(e.to_string()))?;
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(&err)?);
    w.write_all(MAGIC).map_err(&err)?;
    w.write_u64::<LittleEndian>(header.len() as u64).map_err(&err)?;
    w.write_all(&header).map_err(&err)?;
    for p in &set.patches {
        for &v in &p.data {
            w.write_f32::<LittleEndian>(v).map_err(&err)?;
        }
    }
    for p in &set.patches {
        w.write_all(&p.mask).map_err(&err)?;
    }
    w.write_u64::<LittleEndian>(index.len() as u64).map_err(&err)?;
    w.write_all(&index).map_err(&err)?;
    w.flush().map_err(&err)
}

pub fn read_patch_set(path: impl AsRef<Path>) -> Result<PatchSet, PatchError> {
    let path = path.as_ref();
    let err = io_err(path);
    let bad = |m: &str| PatchError::Format(format!("{}: {m}", path.display()));
    let mut r = BufReader::new(std::fs::File::open(path).map_err(&err)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("not a patch dataset"));
    }
    let section = |r: &mut BufReader<std::fs::File>| -> Result<Vec<u8>, PatchError> {
        let n = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
        Ok(buf)
    };
    let header: Header =
        serde_json::from_slice(&section(&mut r)?).map_err(|e| bad(&e.to_string()))?;
    if header.k != header.channels.len() {
        return Err(bad("channel count disagrees with channel names"));
    }
    let plane = header.s * header.s;
    let mut data = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let mut t = vec![0f32; header.k * plane];
        r.read_f32_into::<LittleEndian>(&mut t).map_err(|_| bad("truncated tensors"))?;
        data.push(t);
    }
    let mut masks = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let mut m = vec![0u8; plane];
        r.read_exact(&mut m).map_err(|_| bad("truncated masks"))?;
        masks.push(m);
    }
    let index: Vec<IndexRecord> =
        serde_json::from_slice(&section(&mut r)?).map_err(|e| bad(&e.to_string()))?;
    if index.len() != header.count {
        return Err(bad("index length disagrees with header"));
    }
    let patches = index
        .into_iter()
        .zip(data.into_iter().zip(masks))
        .map(|(rec, (data, mask))| Patch {
            subject_id: rec.subject_id,
            slice_index: rec.z,
            grid_xy: [rec.x, rec.y],
            data,
            mask,
            coverage: rec.coverage,
            label: rec.label,
            augment: rec.augment,
        })
        .collect();
    Ok(PatchSet { channels: header.channels, patch_size: header.s, patches })
}
