use crate::imgcore::{Geometry, Mask, Volume};

use super::RigidTransform;

/// Slack for treating a continuous index as inside the grid.
const EDGE_TOL: f64 = 1e-6;

#[inline]
fn axis_cell(idx: f64, n: usize) -> Option<(usize, f64)> {
    let max = (n - 1) as f64;
    if !(idx >= -EDGE_TOL && idx <= max + EDGE_TOL) {
        return None;
    }
    let idx = idx.clamp(0.0, max);
    if n == 1 {
        return Some((0, 0.0));
    }
    let i0 = (idx.floor() as usize).min(n - 2);
    Some((i0, idx - i0 as f64))
}

/// Trilinear sample at a continuous voxel index; 0 outside the grid.
#[inline]
pub(crate) fn trilinear(data: &[f32], dims: [usize; 3], idx: [f64; 3]) -> f64 {
    let (Some((x0, fx)), Some((y0, fy)), Some((z0, fz))) =
        (axis_cell(idx[0], dims[0]), axis_cell(idx[1], dims[1]), axis_cell(idx[2], dims[2]))
    else {
        return 0.0;
    };
    let x1 = (x0 + 1).min(dims[0] - 1);
    let y1 = (y0 + 1).min(dims[1] - 1);
    let z1 = (z0 + 1).min(dims[2] - 1);
    let at = |x: usize, y: usize, z: usize| data[x + dims[0] * (y + dims[1] * z)] as f64;
    let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
    let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
    let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
    let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
    let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
    lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
}

/// Moving image sampled on `target` through `t`, in `f64`.
pub(crate) fn resample_linear_f64(
    moving: &Volume,
    t: &RigidTransform,
    target: &Geometry,
) -> Vec<f64> {
    let map = t.mapper();
    let mg = moving.geometry();
    let mut out = Vec::with_capacity(target.len());
    for z in 0..target.dims[2] {
        for y in 0..target.dims[1] {
            for x in 0..target.dims[0] {
                let p = target.voxel_to_world([x as f64, y as f64, z as f64]);
                out.push(trilinear(moving.data(), mg.dims, mg.world_to_voxel(map(p))));
            }
        }
    }
    out
}

/// Resample `moving` onto `target`: each target voxel takes the trilinear
/// value of `moving` at `t(world(voxel))`, or 0 outside its grid.
pub fn resample_linear(moving: &Volume, t: &RigidTransform, target: &Geometry) -> Volume {
    let values = resample_linear_f64(moving, t, target);
    Volume::from_f64(*target, &values).expect("interpolated values are finite")
}

/// Nearest-neighbour counterpart of [`resample_linear`] for masks.
pub fn resample_nearest(mask: &Mask, t: &RigidTransform, target: &Geometry) -> Mask {
    let map = t.mapper();
    let mg = mask.geometry();
    Mask::from_fn(*target, |x, y, z| {
        let p = target.voxel_to_world([x as f64, y as f64, z as f64]);
        let idx = mg.world_to_voxel(map(p));
        let mut c = [0usize; 3];
        for a in 0..3 {
            let r = idx[a].round();
            if !(r >= 0.0 && r <= (mg.dims[a] - 1) as f64) {
                return false;
            }
            c[a] = r as usize;
        }
        mask.contains(c[0], c[1], c[2])
    })
}

/// Mean-pool by `factor` along every axis (clamped to the axis length);
/// trailing voxels that do not fill a block are dropped.
pub fn downsample_mean(v: &Volume, factor: usize) -> Volume {
    if factor <= 1 {
        return v.clone();
    }
    let g = v.geometry();
    let f: [usize; 3] = std::array::from_fn(|a| factor.min(g.dims[a]));
    let dims: [usize; 3] = std::array::from_fn(|a| g.dims[a] / f[a]);
    let spacing = std::array::from_fn(|a| g.spacing[a] * f[a] as f64);
    let origin = std::array::from_fn(|a| g.origin[a] + (f[a] as f64 - 1.0) / 2.0 * g.spacing[a]);
    let geom = Geometry::new(dims, spacing, origin).expect("pooled geometry is valid");
    let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
    let mut out = Vec::with_capacity(geom.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let mut acc = 0.0f64;
                for dz in 0..f[2] {
                    for dy in 0..f[1] {
                        for dx in 0..f[0] {
                            acc += v.get(x * f[0] + dx, y * f[1] + dy, z * f[2] + dz) as f64;
                        }
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Volume::from_f64(geom, &out).expect("pooled values are finite")
}

/// Mask pooled like [`downsample_mean`]; a block is foreground when at
/// least half its voxels are.
pub fn downsample_mask(m: &Mask, factor: usize) -> Mask {
    let pooled = downsample_mean(&m.to_volume(), factor);
    let g = *pooled.geometry();
    Mask::new(g, pooled.data().iter().map(|&v| u8::from(v >= 0.5)).collect())
        .expect("same geometry")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3], spacing: [f64; 3]) -> Volume {
        let g = Geometry::new(dims, spacing, [0.0; 3]).unwrap();
        let mut d = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    d.push((x as f32) * 1.5 + (y as f32) * 0.25 - (z as f32) * 2.0);
                }
            }
        }
        Volume::new(g, d).unwrap()
    }

    #[test]
    fn identity_reproduces_input() {
        let v = ramp([7, 5, 4], [1.2, 0.8, 2.5]);
        let out = resample_linear(&v, &RigidTransform::identity(), v.geometry());
        assert_eq!(out, v);
        let centered = RigidTransform::with_center(v.geometry().center());
        assert_eq!(resample_linear(&v, &centered, v.geometry()), v);
    }

    #[test]
    fn one_voxel_shift() {
        let v = ramp([8, 6, 5], [2.0, 1.0, 3.0]);
        let t = RigidTransform::new([0.0; 3], [2.0, 0.0, 0.0], [0.0; 3]);
        let out = resample_linear(&v, &t, v.geometry());
        for z in 0..5 {
            for y in 0..6 {
                for x in 0..7 {
                    assert_eq!(out.get(x, y, z), v.get(x + 1, y, z));
                }
                assert_eq!(out.get(7, y, z), 0.0);
            }
        }
    }

    #[test]
    fn half_voxel_shift_gives_midpoints() {
        let v = ramp([8, 4, 4], [1.0; 3]);
        let t = RigidTransform::new([0.0; 3], [0.5, 0.0, 0.0], [0.0; 3]);
        let out = resample_linear(&v, &t, v.geometry());
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..7 {
                    let mid = (v.get(x, y, z) as f64 + v.get(x + 1, y, z) as f64) / 2.0;
                    assert!((out.get(x, y, z) as f64 - mid).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn nearest_mask_moves_and_stays_binary() {
        let g = Geometry::unit([6, 6, 6]).unwrap();
        let m = Mask::from_fn(g, |x, y, z| (x, y, z) == (3, 3, 3));
        assert_eq!(resample_nearest(&m, &RigidTransform::identity(), &g), m);
        let t = RigidTransform::new([0.0; 3], [1.0, 0.0, 0.0], [0.0; 3]);
        let moved = resample_nearest(&m, &t, &g);
        assert!(moved.contains(2, 3, 3));
        assert_eq!(moved.count(), 1);
        let r = RigidTransform::new([0.3, -0.2, 0.7], [0.4, 1.1, -0.6], g.center());
        let big = Mask::from_fn(g, |x, y, z| x + y + z > 6);
        assert!(resample_nearest(&big, &r, &g).data().iter().all(|&v| v <= 1));
    }

    #[test]
    fn mean_pool_geometry() {
        let v = ramp([8, 8, 4], [1.0; 3]);
        let p = downsample_mean(&v, 2);
        assert_eq!(p.dims(), [4, 4, 2]);
        assert_eq!(p.spacing(), [2.0; 3]);
        assert_eq!(p.origin(), [0.5; 3]);
        // a linear ramp's block mean is its value at the block center
        let expected = 1.5 * 0.5 + 0.25 * 0.5 - 2.0 * 0.5;
        assert!((p.get(0, 0, 0) as f64 - expected).abs() < 1e-6);
    }
}
