//! Point-cloud containers, farthest point sampling, KNN patches and rigid
//! rotation.

use crate::error::{Error, Result};
use crate::rotation::{Mat3, RotationMatrix};

pub type Point = [f64; 3];

/// Default patch count and patch size for classification.
pub const DEFAULT_GROUPS: usize = 64;
pub const DEFAULT_GROUP_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    label: Option<usize>,
}

pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Argument("point cloud needs at least one point".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("point cloud has non-finite coordinates".into()));
        }
        Ok(PointCloud { points, label: None })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Centers on the centroid and scales to unit maximum norm.
    pub fn normalized(&self) -> PointCloud {
        let c = self.centroid();
        let centered: Vec<Point> = self
            .points
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let max_norm = centered
            .iter()
            .map(|p| sq_dist(p, &[0.0; 3]).sqrt())
            .fold(0.0, f64::max);
        let scale = if max_norm > 0.0 { 1.0 / max_norm } else { 1.0 };
        PointCloud {
            points: centered.iter().map(|p| p.map(|v| v * scale)).collect(),
            label: self.label,
        }
    }

    /// `X' = X · R`; the label is kept.
    pub fn rotated(&self, r: &RotationMatrix) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| r.apply(p)).collect(),
            label: self.label,
        }
    }
}

/// Applies a raw matrix after checking that it is a proper rotation.
pub fn apply_rotation(cloud: &PointCloud, r: &Mat3) -> Result<PointCloud> {
    let r = RotationMatrix::new(*r)?;
    Ok(cloud.rotated(&r))
}

/// A local group of points around an FPS-selected center.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub points: Vec<Point>,
    pub center: Point,
    pub center_index: usize,
    pub indices: Vec<usize>,
}

/// Farthest point sampling.
///
/// Starts from `seed_index`; every following pick maximizes the minimum
/// squared distance to the points already chosen, with ties going to the
/// lowest index.
pub fn fps(cloud: &PointCloud, g: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if g == 0 || g > n {
        return Err(Error::Argument(format!("fps: cannot pick {g} of {n} points")));
    }
    if seed_index >= n {
        return Err(Error::Argument(format!("fps: seed {seed_index} out of {n}")));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(g);
    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = seed_index;
    loop {
        selected.push(current);
        chosen[current] = true;
        if selected.len() == g {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = sq_dist(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !chosen[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Indices of the `k` points nearest to `center_index` (itself included),
/// ordered by distance then index.
pub fn knn_indices(cloud: &PointCloud, center_index: usize, k: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("knn: cannot take {k} of {n} points")));
    }
    if center_index >= n {
        return Err(Error::Argument(format!("knn: center {center_index} out of {n}")));
    }
    let c = cloud.points()[center_index];
    let mut order: Vec<(f64, usize)> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| (sq_dist(p, &c), i))
        .collect();
    let key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < n {
        order.select_nth_unstable_by(k - 1, key);
        order.truncate(k);
    }
    order.sort_by(key);
    Ok(order.into_iter().map(|(_, i)| i).collect())
}

pub fn knn_patch(cloud: &PointCloud, center_index: usize, k: usize) -> Result<Patch> {
    let indices = knn_indices(cloud, center_index, k)?;
    let pts = cloud.points();
    Ok(Patch {
        points: indices.iter().map(|&i| pts[i]).collect(),
        center: pts[center_index],
        center_index,
        indices,
    })
}

/// FPS centers followed by a KNN patch around each.
pub fn make_patches(cloud: &PointCloud, g: usize, k: usize, seed_index: usize) -> Result<Vec<Patch>> {
    if k > cloud.len() {
        return Err(Error::Argument(format!(
            "patch size {k} exceeds cloud size {}",
            cloud.len()
        )));
    }
    fps(cloud, g, seed_index)?
        .into_iter()
        .map(|c| knn_patch(cloud, c, k))
        .collect()
}
