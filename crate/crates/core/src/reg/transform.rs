use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RegError;

type Mat3 = [[f64; 3]; 3];

/// Rigid motion `p -> R (p - center) + center + translation`.
///
/// `R = Rz * Ry * Rx` from the XYZ Euler angles in `rotation` (radians).
/// As used by the resamplers, the transform maps points of the fixed
/// (target) grid to the moving image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidTransform {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub center: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn transpose(m: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| m[j][i]))
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: [0.0; 3], translation: [0.0; 3], center: [0.0; 3] }
    }

    pub fn new(rotation: [f64; 3], translation: [f64; 3], center: [f64; 3]) -> Self {
        Self { rotation, translation, center }
    }

    pub fn with_center(center: [f64; 3]) -> Self {
        Self { center, ..Self::identity() }
    }

    /// Parameter vector `(rx, ry, rz, tx, ty, tz)`.
    pub fn params(&self) -> [f64; 6] {
        let [a, b, c] = self.rotation;
        let [x, y, z] = self.translation;
        [a, b, c, x, y, z]
    }

    pub fn from_params(p: [f64; 6], center: [f64; 3]) -> Self {
        Self { rotation: [p[0], p[1], p[2]], translation: [p[3], p[4], p[5]], center }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == [0.0; 3] && self.translation == [0.0; 3]
    }

    pub fn matrix(&self) -> Mat3 {
        let [a, b, c] = self.rotation;
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
        mat_mul(&rz, &mat_mul(&ry, &rx))
    }

    /// Affine form `p -> M p + offset`.
    fn affine(&self) -> (Mat3, [f64; 3]) {
        let m = self.matrix();
        let rc = mat_vec(&m, self.center);
        let offset = std::array::from_fn(|i| self.center[i] + self.translation[i] - rc[i]);
        (m, offset)
    }

    fn from_affine(m: &Mat3, offset: [f64; 3], center: [f64; 3]) -> Self {
        let rotation = euler_xyz(m);
        let r = Self { rotation, translation: [0.0; 3], center }.matrix();
        let rc = mat_vec(&r, center);
        let translation = std::array::from_fn(|i| offset[i] - center[i] + rc[i]);
        Self { rotation, translation, center }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        if self.rotation == [0.0; 3] {
            return std::array::from_fn(|i| p[i] + self.translation[i]);
        }
        let m = self.matrix();
        let d = std::array::from_fn(|i| p[i] - self.center[i]);
        let r = mat_vec(&m, d);
        std::array::from_fn(|i| r[i] + self.center[i] + self.translation[i])
    }

    /// A point mapper with the rotation matrix precomputed.
    pub fn mapper(&self) -> impl Fn([f64; 3]) -> [f64; 3] + Copy {
        let (m, offset) = self.affine();
        let pure = self.rotation == [0.0; 3];
        let t = self.translation;
        move |p: [f64; 3]| {
            if pure {
                std::array::from_fn(|i| p[i] + t[i])
            } else {
                let r = mat_vec(&m, p);
                std::array::from_fn(|i| r[i] + offset[i])
            }
        }
    }

    pub fn inverse(&self) -> Self {
        let (m, offset) = self.affine();
        let mt = transpose(&m);
        let o = mat_vec(&mt, offset);
        Self::from_affine(&mt, [-o[0], -o[1], -o[2]], self.center)
    }

    /// `self` after `first`: `p -> self(first(p))`.
    pub fn compose(&self, first: &Self) -> Self {
        let (ma, oa) = self.affine();
        let (mb, ob) = first.affine();
        let m = mat_mul(&ma, &mb);
        let mob = mat_vec(&ma, ob);
        Self::from_affine(&m, std::array::from_fn(|i| mob[i] + oa[i]), first.center)
    }

    /// Rotation angle of `R` in radians (axis-angle magnitude).
    pub fn rotation_angle(&self) -> f64 {
        let m = self.matrix();
        let tr = m[0][0] + m[1][1] + m[2][2];
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Largest displacement between `self` and `other` over `points`.
    pub fn max_displacement(&self, other: &Self, points: &[[f64; 3]]) -> f64 {
        points
            .iter()
            .map(|&p| {
                let a = self.apply(p);
                let b = other.apply(p);
                (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Serialize with 17 significant digits per real.
    pub fn to_json(&self) -> String {
        let arr = |v: [f64; 3]| {
            let mut s = String::from("[");
            for (i, x) in v.iter().enumerate() {
                if i > 0 {
                    s.push_str(", ");
                }
                let _ = write!(s, "{x:.16e}");
            }
            s.push(']');
            s
        };
        format!(
            "{{\n  \"rotation\": {},\n  \"translation\": {},\n  \"center\": {}\n}}\n",
            arr(self.rotation),
            arr(self.translation),
            arr(self.center)
        )
    }

    pub fn from_json(text: &str) -> Result<Self, RegError> {
        serde_json::from_str(text).map_err(|e| RegError::Transform(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RegError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json())
            .map_err(|e| RegError::Transform(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RegError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| RegError::Transform(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// XYZ Euler angles of a rotation matrix `Rz * Ry * Rx`.
fn euler_xyz(m: &Mat3) -> [f64; 3] {
    let sb = (-m[2][0]).clamp(-1.0, 1.0);
    let b = sb.asin();
    if sb.abs() < 1.0 - 1e-12 {
        [m[2][1].atan2(m[2][2]), b, m[1][0].atan2(m[0][0])]
    } else {
        // gimbal lock: fold z rotation into x
        [(-m[1][2]).atan2(m[1][1]), b, 0.0]
    }
}
