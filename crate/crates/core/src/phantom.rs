//! Synthetic multi-modal studies with known ground truth.
//!
//! The reference channel (GED4) is a smooth abdomen-like scene: a body
//! ellipsoid, the organ, a spleen-like ellipsoid, a spine cylinder and a few
//! dark vessel blobs inside the organ. Lesioned organ voxels carry
//! voxel-scale speckle. Every other channel is a monotone remap of the noise
//! free reference, displaced by its planted rigid transform, with its own
//! noise.

use std::collections::{BTreeMap, BinaryHeap};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::imgcore::{
    save_mask, save_volume, write_manifest, Geometry, ImageError, ManifestRecord, Mask, Modality,
    Stage, Study, Volume,
};
use crate::reg::{resample_linear, RigidTransform};

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("ground truth sidecar: {0}")]
    Sidecar(String),
}

/// Intensities of the noise-free reference are mapped to `[0, 1]` by this
/// full scale before remapping.
pub const FULL_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    /// mm, in world coordinates
    pub center: [f64; 3],
    /// mm
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    fn q(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2)).sum()
    }

    /// Approximate signed distance in mm, positive inside.
    fn depth(&self, p: [f64; 3]) -> f64 {
        let min_axis = self.semi_axes.iter().copied().fold(f64::INFINITY, f64::min);
        (1.0 - self.q(p).sqrt()) * min_axis
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.q(p) <= 1.0
    }
}

/// `out = offset + scale * u^gamma` with `u` the reference intensity over
/// [`FULL_SCALE`], clamped to `[0, 1]`. A negative `scale` inverts contrast.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Remap {
    pub gamma: f64,
    pub scale: f64,
    pub offset: f64,
}

impl Remap {
    pub const IDENTITY: Remap = Remap { gamma: 1.0, scale: FULL_SCALE, offset: 0.0 };

    pub fn apply(&self, v: f64) -> f64 {
        let u = (v / FULL_SCALE).clamp(0.0, 1.0);
        self.offset + self.scale * u.powf(self.gamma)
    }

    /// Default remap per modality; three channels invert contrast.
    pub fn default_for(m: Modality) -> Remap {
        let r = |gamma, scale, offset| Remap { gamma, scale, offset };
        match m {
            Modality::T1 => r(0.6, 800.0, 60.0),
            Modality::T2 => r(1.5, -700.0, 800.0),
            Modality::DWI => r(2.0, -600.0, 700.0),
            Modality::GED1 => r(1.8, 900.0, 20.0),
            Modality::GED2 => r(0.7, -800.0, 900.0),
            Modality::GED3 => r(0.5, 700.0, 100.0),
            Modality::GED4 => Remap::IDENTITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub organ: Ellipsoid,
    pub lesion_fraction: f64,
    /// Standard deviation of the lesion speckle, in reference units.
    pub texture_contrast: f64,
    /// Channels to render; GED4 is always rendered.
    pub modalities: Vec<Modality>,
    /// Remaps for channels other than GED4; missing entries use
    /// [`Remap::default_for`].
    pub modality_maps: BTreeMap<Modality, Remap>,
    /// Maps reference-grid points into each moving channel. Missing entries
    /// are the identity.
    pub planted_transform: BTreeMap<Modality, RigidTransform>,
    pub noise_sigma: f64,
    pub stage: Option<u8>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::new([64, 64, 64], [2.0; 3])
    }
}

impl PhantomSpec {
    /// Spec with the organ placed in the right upper part of the field of
    /// view and all seven channels.
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        let ext: [f64; 3] = std::array::from_fn(|a| (dims[a].max(1) - 1) as f64 * spacing[a]);
        Self {
            dims,
            spacing,
            organ: Ellipsoid {
                center: [0.40 * ext[0], 0.45 * ext[1], 0.50 * ext[2]],
                semi_axes: [0.26 * ext[0], 0.22 * ext[1], 0.32 * ext[2]],
            },
            lesion_fraction: 0.0,
            texture_contrast: 80.0,
            modalities: Modality::ALL.to_vec(),
            modality_maps: BTreeMap::new(),
            planted_transform: BTreeMap::new(),
            noise_sigma: 10.0,
            stage: None,
            seed: 0,
        }
    }

    pub fn geometry(&self) -> Result<Geometry, PhantomError> {
        Geometry::new(self.dims, self.spacing, [0.0; 3])
            .map_err(|e| PhantomError::InvalidSpec(e.to_string()))
    }

    /// Plant independent random transforms on every non-reference channel,
    /// drawn uniformly with rotation up to `max_deg` per axis and
    /// translation up to `max_mm` per axis, about the grid center.
    pub fn with_random_transforms(mut self, max_deg: f64, max_mm: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7472_616e_7366_6f72);
        let center = self.geometry().map(|g| g.center()).unwrap_or([0.0; 3]);
        for &m in &self.modalities {
            if m != Modality::REFERENCE {
                let t = random_rigid(&mut rng, max_deg, max_mm, center);
                self.planted_transform.insert(m, t);
            }
        }
        self
    }

    fn remap(&self, m: Modality) -> Remap {
        if m == Modality::REFERENCE {
            return Remap::IDENTITY;
        }
        self.modality_maps.get(&m).copied().unwrap_or_else(|| Remap::default_for(m))
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        let g = self.geometry()?;
        let ext = g.extent();
        for a in 0..3 {
            let (c, r) = (self.organ.center[a], self.organ.semi_axes[a]);
            if !(r > 0.0) || c - r < 0.0 || c + r > ext[a] {
                return bad(format!("organ does not fit inside the field of view on axis {a}"));
            }
        }
        if !(0.0..=1.0).contains(&self.lesion_fraction) {
            return bad(format!("lesion_fraction {} outside [0, 1]", self.lesion_fraction));
        }
        if !(self.texture_contrast >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("texture_contrast and noise_sigma must be nonnegative".into());
        }
        for (m, r) in &self.modality_maps {
            if !(r.gamma > 0.0 && r.gamma.is_finite()) || r.scale == 0.0 || !r.scale.is_finite() {
                return bad(format!("remap for {m} is not strictly monotone"));
            }
        }
        if let Some(s) = self.stage {
            Stage::new(s).map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;
        }
        Ok(())
    }
}

/// Uniform random rigid transform about `center`.
pub fn random_rigid(rng: &mut impl Rng, max_deg: f64, max_mm: f64, center: [f64; 3]) -> RigidTransform {
    let rot = max_deg.to_radians();
    let rotation = std::array::from_fn(|_| rng.random_range(-1.0..=1.0) * rot);
    let translation = std::array::from_fn(|_| rng.random_range(-1.0..=1.0) * max_mm);
    RigidTransform::new(rotation, translation, center)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub lesion_fraction_target: f64,
    pub lesion_fraction: f64,
    pub lesion_voxels: usize,
    pub organ_voxels: usize,
    pub transforms: BTreeMap<Modality, RigidTransform>,
    pub remaps: BTreeMap<Modality, Remap>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub study: Study,
    /// Organ mask on the reference grid.
    pub organ_mask: Mask,
    pub body_mask: Mask,
    pub lesion_mask: Mask,
    /// Reference channel before noise.
    pub clean_reference: Volume,
    pub truth: GroundTruth,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Scene {
    body: Ellipsoid,
    organ: Ellipsoid,
    spleen: Ellipsoid,
    spine: ([f64; 2], f64),
    vessels: Vec<Ellipsoid>,
    edge: f64,
}

impl Scene {
    fn new(spec: &PhantomSpec, g: &Geometry, rng: &mut impl Rng) -> Self {
        let e = g.extent();
        let frac = |f: [f64; 3]| -> [f64; 3] { std::array::from_fn(|a| f[a] * e[a]) };
        let o = spec.organ;
        let vessels = (0..4)
            .map(|_| {
                let center = std::array::from_fn(|a| {
                    o.center[a] + rng.random_range(-0.5..0.5) * o.semi_axes[a]
                });
                let r = 0.12 * o.semi_axes.iter().copied().fold(f64::INFINITY, f64::min);
                Ellipsoid { center, semi_axes: [r, r * 1.3, r * 2.0] }
            })
            .collect();
        Self {
            body: Ellipsoid { center: frac([0.5, 0.5, 0.5]), semi_axes: frac([0.47, 0.40, 0.49]) },
            organ: o,
            spleen: Ellipsoid { center: frac([0.75, 0.50, 0.55]), semi_axes: frac([0.08, 0.11, 0.14]) },
            spine: ([0.5 * e[0], 0.80 * e[1]], 0.06 * e[0].min(e[1])),
            vessels,
            edge: 0.5 * g.spacing.iter().sum::<f64>() / 3.0,
        }
    }

    fn render(&self, p: [f64; 3]) -> f64 {
        let blend = |v: f64, depth: f64, target: f64| v + sigmoid(depth / self.edge) * (target - v);
        let mut v = 0.0;
        v = blend(v, self.body.depth(p), 180.0);
        let sd = self.spine.1 - ((p[0] - self.spine.0[0]).powi(2) + (p[1] - self.spine.0[1]).powi(2)).sqrt();
        v = blend(v, sd, 760.0);
        v = blend(v, self.spleen.depth(p), 380.0);
        let shade = 20.0 * ((p[0] * 0.07).sin() + (p[1] * 0.05 + p[2] * 0.03).cos());
        v = blend(v, self.organ.depth(p), 520.0 + shade);
        for ves in &self.vessels {
            v = blend(v, ves.depth(p), 140.0);
        }
        v
    }
}

/// Grow lesion blobs inside `organ` until exactly `target` voxels are
/// labeled. Growth pops frontier voxels in random priority order, which
/// gives irregular connected blobs.
fn grow_lesions(organ: &Mask, target: usize, rng: &mut impl Rng) -> Mask {
    let g = *organ.geometry();
    let inside: Vec<usize> = (0..g.len()).filter(|&i| organ.contains_index(i)).collect();
    let mut lesion = vec![0u8; g.len()];
    let mut labeled = 0;
    let n_blobs = (target / 400).clamp(1, 12);
    let mut heap = BinaryHeap::new();
    let mut seeded = 0;
    while labeled < target {
        if heap.is_empty() || seeded < n_blobs {
            loop {
                let i = inside[rng.random_range(0..inside.len())];
                if lesion[i] == 0 {
                    heap.push((rng.random::<u64>(), i));
                    break;
                }
            }
            seeded += 1;
            continue;
        }
        let (_, i) = heap.pop().expect("nonempty");
        if lesion[i] == 1 {
            continue;
        }
        lesion[i] = 1;
        labeled += 1;
        let [x, y, z] = g.coords(i);
        let mut push = |x: usize, y: usize, z: usize| {
            let j = g.index(x, y, z);
            if lesion[j] == 0 && organ.contains_index(j) {
                heap.push((rng.random::<u64>(), j));
            }
        };
        if x > 0 { push(x - 1, y, z) }
        if y > 0 { push(x, y - 1, z) }
        if z > 0 { push(x, y, z - 1) }
        if x + 1 < g.dims[0] { push(x + 1, y, z) }
        if y + 1 < g.dims[1] { push(x, y + 1, z) }
        if z + 1 < g.dims[2] { push(x, y, z + 1) }
    }
    Mask::new(g, lesion).expect("same geometry")
}

fn add_noise(values: &mut [f64], sigma: f64, rng: &mut impl Rng) {
    if sigma > 0.0 {
        for v in values {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma * z;
        }
    }
}

/// Render a phantom study. Deterministic in `spec.seed`.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    spec.validate()?;
    let g = spec.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = Scene::new(spec, &g, &mut rng);
    let world = |x: usize, y: usize, z: usize| g.voxel_to_world([x as f64, y as f64, z as f64]);

    let organ_mask = Mask::from_fn(g, |x, y, z| scene.organ.contains(world(x, y, z)));
    let body_mask = Mask::from_fn(g, |x, y, z| scene.body.contains(world(x, y, z)));
    let organ_voxels = organ_mask.count();
    if organ_voxels == 0 {
        return Err(PhantomError::InvalidSpec("organ covers no voxel centers".into()));
    }
    let target = (spec.lesion_fraction * organ_voxels as f64).round() as usize;
    let lesion_mask = grow_lesions(&organ_mask, target, &mut rng);

    let mut clean = Vec::with_capacity(g.len());
    for z in 0..g.dims[2] {
        for y in 0..g.dims[1] {
            for x in 0..g.dims[0] {
                clean.push(scene.render(world(x, y, z)));
            }
        }
    }
    for (i, v) in clean.iter_mut().enumerate() {
        if lesion_mask.contains_index(i) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (*v + spec.texture_contrast * z).max(0.0);
        }
    }
    let clean_reference = Volume::from_f64(g, &clean)?;

    let mut channels: Vec<Modality> = spec.modalities.clone();
    channels.push(Modality::REFERENCE);
    channels.sort();
    channels.dedup();

    let mut modalities = BTreeMap::new();
    let mut transforms = BTreeMap::new();
    let mut remaps = BTreeMap::new();
    for m in channels {
        let t = if m == Modality::REFERENCE {
            RigidTransform::identity()
        } else {
            spec.planted_transform.get(&m).copied().unwrap_or_else(|| RigidTransform::with_center(g.center()))
        };
        let remap = spec.remap(m);
        let displaced = if t.is_identity() {
            clean_reference.clone()
        } else {
            resample_linear(&clean_reference, &t.inverse(), &g)
        };
        let mut values: Vec<f64> = displaced.data().iter().map(|&v| remap.apply(v as f64)).collect();
        add_noise(&mut values, spec.noise_sigma, &mut rng);
        modalities.insert(m, Volume::from_f64(g, &values)?);
        transforms.insert(m, t);
        remaps.insert(m, remap);
    }

    let stage = spec.stage.map(Stage::new).transpose()?;
    let study = Study::new(format!("phantom_{:04}", spec.seed), modalities, Some(organ_mask.clone()), stage)?;
    let lesion_voxels = lesion_mask.count();
    Ok(Phantom {
        study,
        organ_mask,
        body_mask,
        lesion_mask,
        clean_reference,
        truth: GroundTruth {
            lesion_fraction_target: spec.lesion_fraction,
            lesion_fraction: lesion_voxels as f64 / organ_voxels as f64,
            lesion_voxels,
            organ_voxels,
            transforms,
            remaps,
            seed: spec.seed,
        },
    })
}

/// Seeded per-stage Gaussian scores clamped to `[0, 1]`, stage-major.
pub fn synthetic_scores(
    n_per_stage: [usize; 4],
    stage_means: [f64; 4],
    sigma: f64,
    seed: u64,
) -> Result<Vec<(f64, Stage)>, PhantomError> {
    if stage_means.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(PhantomError::InvalidSpec("stage means must be increasing".into()));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(PhantomError::InvalidSpec("sigma must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_stage.iter().sum());
    for (k, (&n, &mean)) in n_per_stage.iter().zip(&stage_means).enumerate() {
        let stage = Stage::new(k as u8 + 1)?;
        let dist = Normal::new(mean, sigma).expect("sigma is finite and nonnegative");
        for _ in 0..n {
            let s = if sigma == 0.0 { mean } else { dist.sample(&mut rng) };
            out.push((s.clamp(0.0, 1.0), stage));
        }
    }
    Ok(out)
}

/// Files written for one phantom, relative to the cohort directory.
fn write_phantom(p: &Phantom, dir: &Path) -> Result<ManifestRecord, PhantomError> {
    let id = &p.study.subject_id;
    let sub = dir.join(id);
    std::fs::create_dir_all(&sub).map_err(|e| ImageError::io(&sub, e))?;
    let rel = |name: String| PathBuf::from(id).join(name);
    let mut modalities = BTreeMap::new();
    for (m, v) in &p.study.modalities {
        let r = rel(format!("{m}.nii"));
        save_volume(v, dir.join(&r))?;
        modalities.insert(m.name().to_string(), r);
    }
    let mask = rel("mask.nii".into());
    save_mask(&p.organ_mask, dir.join(&mask))?;
    save_mask(&p.lesion_mask, dir.join(rel("lesion.nii".into())))?;
    let truth = serde_json::to_string_pretty(&p.truth).map_err(|e| PhantomError::Sidecar(e.to_string()))?;
    let tp = dir.join(rel("truth.json".into()));
    std::fs::write(&tp, truth + "\n").map_err(|e| ImageError::io(&tp, e))?;
    Ok(ManifestRecord {
        subject_id: id.clone(),
        stage: p.study.stage.map(u8::from),
        mask: Some(mask),
        modalities,
    })
}

/// Write every phantom under `dir` with a `manifest.json` listing them.
/// Each subject gets its own directory holding the channels, `mask.nii`,
/// `lesion.nii` and a `truth.json` sidecar.
pub fn write_cohort(phantoms: &[Phantom], dir: impl AsRef<Path>) -> Result<PathBuf, PhantomError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| ImageError::io(dir, e))?;
    let records = phantoms.iter().map(|p| write_phantom(p, dir)).collect::<Result<Vec<_>, _>>()?;
    let path = dir.join("manifest.json");
    write_manifest(&path, &records)?;
    Ok(path)
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<GroundTruth, PhantomError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ImageError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PhantomError::Sidecar(format!("{}: {e}", path.display())))
}
