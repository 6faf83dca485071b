//! Content/orientation disentanglement of point patches.
//!
//! A patch is centered on its centroid and expressed in its principal-axis
//! frame. Axis signs are fixed by the sign of the third central moment of
//! the projections, which is unchanged when the patch rotates, so the frame
//! rotates with the patch: canonicalizing `p · R` yields the same canonical
//! points and the rotation `R_i · R`.

use std::fmt;

use crate::error::{Error, Result};
use crate::pointcloud::{Patch, Point};
use crate::rotation::{det, mat_mul, transpose, Mat3, RotationMatrix};

/// Two eigenvalues closer than this (relative to the largest) are a tie.
pub const EIGEN_TIE_TOL: f64 = 1e-9;
/// Normalized skewness below this leaves an axis sign undetermined.
pub const SKEW_TOL: f64 = 1e-9;
const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 64;

/// Why a patch has no unique canonical frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDiagnostics {
    pub eigenvalues: [f64; 3],
    pub skewness: [f64; 3],
    pub reason: String,
}

impl fmt::Display for FrameDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (eigenvalues {:?}, skewness {:?})",
            self.reason, self.eigenvalues, self.skewness
        )
    }
}

/// Symmetric eigendecomposition of a 3×3 matrix by cyclic Jacobi sweeps.
///
/// Returns eigenvalues and the matrix whose columns are the matching unit
/// eigenvectors, in no particular order.
pub fn symmetric_eigen(a: &Mat3) -> ([f64; 3], Mat3) {
    let mut a = *a;
    let mut v = *RotationMatrix::IDENTITY.matrix();
    let scale = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = (2.0 * (a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2))).sqrt();
        if off <= JACOBI_TOL * scale || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
            let t = if theta.abs() > 1e150 {
                0.5 / theta
            } else {
                theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
            };
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut j = *RotationMatrix::IDENTITY.matrix();
            j[p][p] = c;
            j[q][q] = c;
            j[p][q] = s;
            j[q][p] = -s;
            a = mat_mul(&transpose(&j), &mat_mul(&a, &j));
            a[p][q] = 0.0;
            a[q][p] = 0.0;
            v = mat_mul(&v, &j);
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

/// Covariance `(1/K) Σ pᵀp` of already-centered points.
pub fn covariance(centered: &[Point]) -> Mat3 {
    let n = centered.len() as f64;
    let mut c = [[0.0; 3]; 3];
    for p in centered {
        for i in 0..3 {
            for j in i..3 {
                c[i][j] += p[i] * p[j];
            }
        }
    }
    for i in 0..3 {
        for j in i..3 {
            c[i][j] /= n;
            c[j][i] = c[i][j];
        }
    }
    c
}

/// Canonical pose `p̄` and orientation `R_i` of one patch, with
/// `p̄ · R_i + centroid` reproducing the patch points.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalPatch {
    pub canonical_points: Vec<Point>,
    pub rotation: RotationMatrix,
    /// FPS-selected patch center `c_i`, absolute coordinates.
    pub center: Point,
    pub centroid: Point,
    /// Eigenvalues, descending.
    pub eigenvalues: [f64; 3],
    /// Normalized skewness along each canonical axis after sign fixing.
    pub skewness: [f64; 3],
}

impl CanonicalPatch {
    /// `p̄ · R_i + centroid`
    pub fn reconstruct(&self) -> Vec<Point> {
        self.canonical_points
            .iter()
            .map(|p| {
                let q = self.rotation.apply(p);
                [q[0] + self.centroid[0], q[1] + self.centroid[1], q[2] + self.centroid[2]]
            })
            .collect()
    }
}

fn skewness(centered: &[Point], axis: &[f64; 3]) -> f64 {
    let n = centered.len() as f64;
    let (mut m2, mut m3) = (0.0, 0.0);
    for p in centered {
        let s = p[0] * axis[0] + p[1] * axis[1] + p[2] * axis[2];
        m2 += s * s;
        m3 += s * s * s;
    }
    m2 /= n;
    m3 /= n;
    if m2 <= 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

/// PCA alignment with skewness-based sign disambiguation.
pub fn pca_canonicalize(patch: &Patch) -> Result<CanonicalPatch> {
    canonicalize_points(&patch.points, patch.center)
}

pub fn canonicalize_points(points: &[Point], center: Point) -> Result<CanonicalPatch> {
    if points.len() < 3 {
        return Err(Error::Argument(format!(
            "canonicalization needs at least 3 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mut centroid = [0.0; 3];
    for p in points {
        for k in 0..3 {
            centroid[k] += p[k];
        }
    }
    let centroid = centroid.map(|v| v / n);
    let centered: Vec<Point> = points
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();

    let (values, vectors) = symmetric_eigen(&covariance(&centered));
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let eigenvalues = order.map(|i| values[i]);
    let mut axes: [[f64; 3]; 3] = order.map(|i| [vectors[0][i], vectors[1][i], vectors[2][i]]);

    let mut skew = [0.0; 3];
    for (k, axis) in axes.iter_mut().enumerate() {
        let s = skewness(&centered, axis);
        if s < 0.0 {
            *axis = axis.map(|v| -v);
        }
        skew[k] = s.abs();
    }

    let degenerate = |reason: String| {
        Err(Error::DegenerateFrame(FrameDiagnostics {
            eigenvalues,
            skewness: skew,
            reason,
        }))
    };
    let top = eigenvalues[0].abs();
    if top <= 0.0 {
        return degenerate("all points coincide".into());
    }
    for w in 0..2 {
        if (eigenvalues[w] - eigenvalues[w + 1]).abs() <= EIGEN_TIE_TOL * top {
            return degenerate(format!("eigenvalues {w} and {} tie", w + 1));
        }
    }
    if let Some(k) = (0..3).find(|&k| skew[k] < SKEW_TOL) {
        return degenerate(format!("axis {k} has no skew to fix its sign"));
    }

    // Rows of `frame` are the canonical axes.
    if det(&axes) < 0.0 {
        let weakest = (0..3)
            .min_by(|&a, &b| skew[a].total_cmp(&skew[b]))
            .expect("three axes");
        axes[weakest] = axes[weakest].map(|v| -v);
        skew[weakest] = -skew[weakest];
    }
    let rotation = RotationMatrix::from_trusted(axes);
    let to_canonical = rotation.transpose();
    let canonical_points = centered.iter().map(|p| to_canonical.apply(p)).collect();
    Ok(CanonicalPatch {
        canonical_points,
        rotation,
        center,
        centroid,
        eigenvalues,
        skewness: skew,
    })
}

/// `R_ij = R_j · R_iᵀ`
pub fn relative_rotation(ri: &RotationMatrix, rj: &RotationMatrix) -> RotationMatrix {
    rj.compose(&ri.transpose())
}

/// Residuals of the equivariance identity for one patch under `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivarianceReport {
    /// Max abs difference of canonical points.
    pub canonical_residual: f64,
    /// `‖R_i' − R_i·R‖_F`
    pub rotation_residual: f64,
}

pub fn equivariance_check(patch: &Patch, r: &RotationMatrix) -> Result<EquivarianceReport> {
    let base = pca_canonicalize(patch)?;
    let rotated = Patch {
        points: patch.points.iter().map(|p| r.apply(p)).collect(),
        center: r.apply(&patch.center),
        center_index: patch.center_index,
        indices: patch.indices.clone(),
    };
    let turned = pca_canonicalize(&rotated)?;
    Ok(compare_frames(&base, &turned, r))
}

/// Compares a canonicalization of `X` against one of `X·R`.
pub fn compare_frames(base: &CanonicalPatch, turned: &CanonicalPatch, r: &RotationMatrix) -> EquivarianceReport {
    let canonical_residual = base
        .canonical_points
        .iter()
        .zip(&turned.canonical_points)
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
        .fold(0.0, f64::max);
    let expected = base.rotation.compose(r);
    EquivarianceReport {
        canonical_residual,
        rotation_residual: crate::rotation::frobenius_diff(turned.rotation.matrix(), expected.matrix()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{frobenius_diff, orthogonality_error, random_rotation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patch(points: &[Point]) -> Patch {
        Patch {
            points: points.to_vec(),
            center: points[0],
            center_index: 0,
            indices: (0..points.len()).collect(),
        }
    }

    fn asymmetric() -> Patch {
        patch(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0], [2.0, 1.0, 1.0]])
    }

    #[test]
    fn symmetric_cross_is_degenerate() {
        let p = patch(&[[2.0, 0.0, 0.0], [-2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]]);
        match pca_canonicalize(&p) {
            Err(Error::DegenerateFrame(d)) => {
                assert!((d.eigenvalues[0] - 2.0).abs() < 1e-12);
                assert!((d.eigenvalues[1] - 0.5).abs() < 1e-12);
                assert!(d.eigenvalues[2].abs() < 1e-12);
            }
            other => panic!("expected degenerate frame, got {other:?}"),
        }
    }

    #[test]
    fn too_few_points() {
        let p = patch(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(pca_canonicalize(&p), Err(Error::Argument(_))));
    }

    #[test]
    fn reconstruction_and_proper_frame() {
        let c = pca_canonicalize(&asymmetric()).unwrap();
        let rebuilt = c.reconstruct();
        for (a, b) in rebuilt.iter().zip(&asymmetric().points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-10);
            }
        }
        assert!((det(c.rotation.matrix()) - 1.0).abs() < 1e-12);
        assert!(orthogonality_error(c.rotation.matrix()) < 1e-12);
        let cov = covariance(&c.canonical_points);
        assert!(cov[0][1].abs() < 1e-10 && cov[0][2].abs() < 1e-10 && cov[1][2].abs() < 1e-10);
        assert!(cov[0][0] >= cov[1][1] && cov[1][1] >= cov[2][2]);
    }

    #[test]
    fn canonical_input_is_a_fixed_point() {
        let c = pca_canonicalize(&asymmetric()).unwrap();
        let again = canonicalize_points(&c.canonical_points, [0.0; 3]).unwrap();
        assert!(frobenius_diff(again.rotation.matrix(), RotationMatrix::IDENTITY.matrix()) < 1e-10);
    }

    #[test]
    fn equivariance_under_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = asymmetric();
        let ident = equivariance_check(&p, &RotationMatrix::IDENTITY).unwrap();
        assert_eq!(ident.canonical_residual, 0.0);
        assert_eq!(ident.rotation_residual, 0.0);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let rep = equivariance_check(&p, &r).unwrap();
            assert!(rep.canonical_residual < 1e-9, "{rep:?}");
            assert!(rep.rotation_residual < 1e-9, "{rep:?}");
        }
    }

    #[test]
    fn relative_rotation_identities() {
        let a = RotationMatrix::about_z(30f64.to_radians());
        let b = RotationMatrix::about_z(90f64.to_radians());
        let rel = relative_rotation(&a, &b);
        assert!(frobenius_diff(rel.matrix(), RotationMatrix::about_z(60f64.to_radians()).matrix()) < 1e-12);
        assert!(frobenius_diff(relative_rotation(&a, &a).matrix(), RotationMatrix::IDENTITY.matrix()) < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (ri, rj) = (random_rotation(&mut rng), random_rotation(&mut rng));
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let moved = relative_rotation(&ri.compose(&r), &rj.compose(&r));
            assert!(frobenius_diff(moved.matrix(), relative_rotation(&ri, &rj).matrix()) < 1e-12);
            assert!(orthogonality_error(moved.matrix()) < 1e-12);
            assert!((det(moved.matrix()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = [[4.0, 1.0, -2.0], [1.0, 2.0, 0.5], [-2.0, 0.5, 3.0]];
        let (vals, vecs) = symmetric_eigen(&a);
        for k in 0..3 {
            let v = [vecs[0][k], vecs[1][k], vecs[2][k]];
            for i in 0..3 {
                let av: f64 = (0..3).map(|j| a[i][j] * v[j]).sum();
                assert!((av - vals[k] * v[i]).abs() < 1e-12);
            }
        }
    }
}
