//! Proper 3×3 rotations in the row-vector convention: a point `p` (a row)
//! maps to `p · R`.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

/// Tolerance used when validating orthogonality and determinant.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, PartialEq)]
pub struct RotationMatrix(Mat3);

impl fmt::Debug for RotationMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("RotationMatrix").field(&self.0).finish()
    }
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Row vector times matrix.
pub fn row_mul(p: &[f64; 3], m: &Mat3) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (j, o) in out.iter_mut().enumerate() {
        *o = p[0] * m[0][j] + p[1] * m[1][j] + p[2] * m[2][j];
    }
    out
}

pub fn frobenius_diff(a: &Mat3, b: &Mat3) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += (a[i][j] - b[i][j]).powi(2);
        }
    }
    s.sqrt()
}

/// Largest deviation of `aᵀa` from the identity.
pub fn orthogonality_error(a: &Mat3) -> f64 {
    let ata = mat_mul(&transpose(a), a);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((ata[i][j] - target).abs());
        }
    }
    worst
}

impl RotationMatrix {
    pub const IDENTITY: RotationMatrix = RotationMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Validates orthogonality and `det = +1` within [`ROTATION_TOL`].
    pub fn new(m: Mat3) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("rotation has non-finite entries".into()));
        }
        let orth = orthogonality_error(&m);
        let d = det(&m);
        if orth > ROTATION_TOL || (d - 1.0).abs() > ROTATION_TOL {
            return Err(Error::Argument(format!(
                "not a proper rotation (orthogonality error {orth:.3e}, det {d})"
            )));
        }
        Ok(RotationMatrix(m))
    }

    /// Wraps a matrix already known to be a proper rotation.
    pub(crate) fn from_trusted(m: Mat3) -> Self {
        RotationMatrix(m)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> RotationMatrix {
        RotationMatrix(transpose(&self.0))
    }

    /// `self · other`
    pub fn compose(&self, other: &RotationMatrix) -> RotationMatrix {
        RotationMatrix(mat_mul(&self.0, &other.0))
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        row_mul(p, &self.0)
    }

    /// Row-major flattening.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        ((self.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Rotation by `theta` about the z axis; `(1,0,0)·Rz(π/2) = (0,1,0)`.
    pub fn about_z(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        RotationMatrix([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rotation from a (not necessarily normalized) quaternion `(w, x, y, z)`.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Argument("zero quaternion".into()));
        }
        let [w, x, y, z] = q.map(|v| v / norm);
        // Column-vector matrix M; row-vector convention uses Mᵀ.
        let m = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        Ok(RotationMatrix(transpose(&m)))
    }
}

/// Uniform sample from SO(3): normalize four standard normals into a unit
/// quaternion and convert.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if let Ok(r) = RotationMatrix::from_quaternion(q) {
            return r;
        }
    }
}

/// Rotation about z by an angle uniform in `[0, 2π)`.
pub fn random_z_rotation<R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix {
    RotationMatrix::about_z(rng.gen_range(0.0..2.0 * PI))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampled_rotations_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            for r in [random_rotation(&mut rng), random_z_rotation(&mut rng)] {
                assert!(orthogonality_error(r.matrix()) < 1e-12);
                assert!((det(r.matrix()) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn z_rotation_fixes_z_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let r = random_z_rotation(&mut rng);
            let p = r.apply(&[0.0, 0.0, 1.0]);
            assert!((p[0]).abs() < 1e-12 && p[1].abs() < 1e-12 && (p[2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = RotationMatrix::about_z(PI / 2.0).apply(&[1.0, 0.0, 0.0]);
        assert!((p[0]).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && p[2].abs() < 1e-12);
    }

    #[test]
    fn quaternion_about_z_matches_closed_form() {
        let theta: f64 = 0.7;
        let q = [(theta / 2.0).cos(), 0.0, 0.0, (theta / 2.0).sin()];
        let r = RotationMatrix::from_quaternion(q).unwrap();
        assert!(frobenius_diff(r.matrix(), RotationMatrix::about_z(theta).matrix()) < 1e-14);
    }

    #[test]
    fn rejects_reflection() {
        let m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(RotationMatrix::new(m).is_err());
    }
}
