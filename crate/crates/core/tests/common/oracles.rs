//! Brute-force references for sampling, grouping and the 3×3 eigensolver.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;
use rimae::canonical::{canonicalize_points, covariance, symmetric_eigen};
use rimae::pointcloud::{fps, knn_indices, Point, PointCloud};
use rimae::seed::derive_rng;

fn d2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Recomputes every minimum distance from scratch at each pick.
pub fn brute_fps(points: &[Point], g: usize, seed_index: usize) -> Vec<usize> {
    let mut chosen = vec![seed_index];
    while chosen.len() < g {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| d2(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

/// Full sort by distance, then index.
pub fn brute_knn(points: &[Point], center: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..points.len()).collect();
    all.sort_by(|&a, &b| {
        d2(&points[a], &points[center])
            .partial_cmp(&d2(&points[b], &points[center]))
            .unwrap()
            .then(a.cmp(&b))
    });
    all.truncate(k);
    all
}

fn to_na(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

#[derive(Debug, Default)]
pub struct OracleSummary {
    pub instances: usize,
    pub fps_mismatches: usize,
    pub knn_mismatches: usize,
    /// Largest `‖C v − λ v‖` over our eigenpairs.
    pub eigen_residual: f64,
    /// Largest eigenvalue difference against nalgebra.
    pub eigenvalue_diff: f64,
    /// Largest `1 − |⟨ours, reference⟩|` over canonical axes.
    pub axis_misalignment: f64,
    /// Largest `‖p̄·R + centroid − p‖`.
    pub reconstruction: f64,
}

/// Runs every oracle on `instances` random small clouds.
pub fn oracle_suite(instances: usize, seed: u64) -> OracleSummary {
    let mut s = OracleSummary { instances, ..Default::default() };
    for t in 0..instances {
        let mut rng = derive_rng(seed, &[t as u64]);
        let n = rng.gen_range(3..40);
        let points: Vec<Point> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let cloud = PointCloud::new(points.clone()).unwrap();

        let g = rng.gen_range(1..=n);
        let start = rng.gen_range(0..n);
        if fps(&cloud, g, start).unwrap() != brute_fps(&points, g, start) {
            s.fps_mismatches += 1;
        }
        let k = rng.gen_range(1..=n);
        let center = rng.gen_range(0..n);
        if knn_indices(&cloud, center, k).unwrap() != brute_knn(&points, center, k) {
            s.knn_mismatches += 1;
        }

        let mean: Point = std::array::from_fn(|k| points.iter().map(|p| p[k]).sum::<f64>() / n as f64);
        let centered: Vec<Point> = points.iter().map(|p| std::array::from_fn(|k| p[k] - mean[k])).collect();
        let c = covariance(&centered);
        let na = to_na(&c);
        let reference = SymmetricEigen::new(na);
        let mut ref_vals: Vec<f64> = reference.eigenvalues.iter().copied().collect();
        ref_vals.sort_by(|a, b| b.total_cmp(a));

        let (vals, vecs) = symmetric_eigen(&c);
        let mut ours = vals.to_vec();
        ours.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in ours.iter().zip(&ref_vals) {
            s.eigenvalue_diff = s.eigenvalue_diff.max((a - b).abs());
        }
        let v = to_na(&vecs);
        for i in 0..3 {
            let col = v.column(i);
            s.eigen_residual = s.eigen_residual.max((na * col - col * vals[i]).norm());
        }

        if let Ok(cp) = canonicalize_points(&points, points[0]) {
            let e = cp.eigenvalues;
            let gap = (e[0] - e[1]).min(e[1] - e[2]) / e[0];
            for (row, lambda) in cp.rotation.matrix().iter().zip(cp.eigenvalues) {
                let axis = nalgebra::Vector3::new(row[0], row[1], row[2]);
                s.eigen_residual = s.eigen_residual.max((na * axis - axis * lambda).norm());
                let best = (0..3)
                    .map(|j| axis.dot(&reference.eigenvectors.column(j)).abs())
                    .fold(0.0, f64::max);
                // Eigenvectors are only well conditioned with a clear gap.
                if gap > 1e-3 {
                    s.axis_misalignment = s.axis_misalignment.max(1.0 - best);
                }
            }
            for (a, b) in cp.reconstruct().iter().zip(&points) {
                s.reconstruction = s.reconstruction.max(d2(a, b).sqrt());
            }
        }
    }
    s
}

impl OracleSummary {
    pub fn passed(&self) -> bool {
        self.fps_mismatches == 0
            && self.knn_mismatches == 0
            && self.eigen_residual < 1e-9
            && self.eigenvalue_diff < 1e-9
            && self.axis_misalignment < 1e-9
            && self.reconstruction < 1e-10
    }
}
