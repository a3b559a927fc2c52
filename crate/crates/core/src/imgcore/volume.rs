use serde::{Deserialize, Serialize};

use super::ImageError;

/// Axis-aligned voxel grid: voxel counts, spacing in mm and the world
/// position of voxel (0, 0, 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, ImageError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(ImageError::InvalidGeometry(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(ImageError::InvalidGeometry(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(ImageError::InvalidGeometry(format!("non-finite origin {origin:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self, ImageError> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index, x fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Continuous voxel index of a world point.
    #[inline]
    pub fn world_to_voxel(&self, point: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (point[a] - self.origin[a]) / self.spacing[a])
    }

    #[inline]
    pub fn voxel_to_world(&self, index: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + index[a] * self.spacing[a])
    }

    /// World coordinates of the grid center.
    pub fn center(&self) -> [f64; 3] {
        self.voxel_to_world(std::array::from_fn(|a| (self.dims[a] as f64 - 1.0) / 2.0))
    }

    /// Physical extent, voxel centers to voxel centers plus one spacing.
    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 * self.spacing[a])
    }
}

/// Dense scalar volume. Intensities are stored as `f32`; all arithmetic
/// over them accumulates in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geom: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != geom.len() {
            return Err(ImageError::LengthMismatch { expected: geom.len(), actual: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(pos));
        }
        Ok(Self { geom, data })
    }

    pub fn zeros(geom: Geometry) -> Self {
        Self { data: vec![0.0; geom.len()], geom }
    }

    /// Build from `f64` values, rounding to storage precision.
    pub fn from_f64(geom: Geometry, data: &[f64]) -> Result<Self, ImageError> {
        Self::new(geom, data.iter().map(|&v| v as f32).collect())
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geom.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn world_to_voxel(&self, point: [f64; 3]) -> [f64; 3] {
        self.geom.world_to_voxel(point)
    }

    pub fn voxel_to_world(&self, index: [f64; 3]) -> [f64; 3] {
        self.geom.voxel_to_world(index)
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Binary organ mask. Any nonzero input value is stored as 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    geom: Geometry,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(geom: Geometry, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != geom.len() {
            return Err(ImageError::LengthMismatch { expected: geom.len(), actual: data.len() });
        }
        let data = data.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self { geom, data })
    }

    pub fn empty(geom: Geometry) -> Self {
        Self { data: vec![0; geom.len()], geom }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(geom.len());
        for z in 0..geom.dims[2] {
            for y in 0..geom.dims[1] {
                for x in 0..geom.dims[0] {
                    data.push(u8::from(f(x, y, z)));
                }
            }
        }
        Self { geom, data }
    }

    /// Threshold a volume: nonzero voxels become foreground.
    pub fn from_volume(v: &Volume) -> Self {
        Self {
            geom: *v.geometry(),
            data: v.data().iter().map(|&x| u8::from(x != 0.0)).collect(),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geom.index(x, y, z)] != 0
    }

    #[inline]
    pub fn contains_index(&self, idx: usize) -> bool {
        self.data[idx] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn to_volume(&self) -> Volume {
        Volume { geom: self.geom, data: self.data.iter().map(|&v| v as f32).collect() }
    }

    /// Inclusive voxel bounding box `(min, max)` of the foreground.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (idx, &v) in self.data.iter().enumerate() {
            if v == 0 {
                continue;
            }
            any = true;
            let c = self.geom.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        any.then_some((lo, hi))
    }
}

/// Linear-interpolated percentile of `values` (`q` in [0, 100]).
/// Returns `None` for an empty slice.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(values[lo] + (values[hi] - values[lo]) * frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_to_voxel_examples() {
        let g = Geometry::unit([8, 8, 8]).unwrap();
        assert_eq!(g.world_to_voxel([3.0, 2.0, 1.0]), [3.0, 2.0, 1.0]);
        let g = Geometry::new([8, 8, 8], [2.0, 1.0, 1.0], [10.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.world_to_voxel([10.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
        let g = Geometry::new([8, 8, 8], [2.0; 3], [0.0; 3]).unwrap();
        assert_eq!(g.world_to_voxel([5.0, 5.0, 5.0]), [2.5, 2.5, 2.5]);
    }

    #[test]
    fn rejects_bad_volumes() {
        let g = Geometry::unit([2, 2, 2]).unwrap();
        assert!(matches!(Volume::new(g, vec![0.0; 7]), Err(ImageError::LengthMismatch { .. })));
        let mut d = vec![0.0; 8];
        d[3] = f32::NAN;
        assert!(matches!(Volume::new(g, d), Err(ImageError::NonFinite(3))));
        assert!(Geometry::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([2, 0, 2], [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn mask_binarizes_and_boxes() {
        let g = Geometry::unit([3, 3, 1]).unwrap();
        let m = Mask::new(g, vec![0, 255, 0, 0, 7, 0, 0, 0, 0]).unwrap();
        assert_eq!(m.data(), &[0, 1, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(m.bounding_box(), Some(([1, 0, 0], [1, 1, 0])));
        assert_eq!(Mask::empty(g).bounding_box(), None);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&mut v, 50.0), Some(3.0));
        assert_eq!(percentile(&mut v, 0.0), Some(1.0));
        assert_eq!(percentile(&mut v, 100.0), Some(5.0));
        assert_eq!(percentile(&mut v, 25.0), Some(2.0));
        assert_eq!(percentile(&mut [], 50.0), None);
    }
}
