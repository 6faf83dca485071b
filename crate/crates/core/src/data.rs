//! Synthetic shape families and on-disk datasets.
//!
//! Every shape is generated upright in a fixed reference pose, then
//! centered and scaled to the unit ball. Helix, asymmetric-L and
//! skewed-ellipsoid have no symmetry, so their local PCA frames are well
//! defined. The lattice cube is a noiseless grid whose patches are
//! symmetric on purpose, which drives the degenerate-frame path.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_cloud, write_cloud};
use crate::pointcloud::{Point, PointCloud};
use crate::seed::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Helix,
    AsymmetricL,
    SkewedEllipsoid,
    LatticeCube,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Helix,
        Family::AsymmetricL,
        Family::SkewedEllipsoid,
        Family::LatticeCube,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Helix => "helix",
            Family::AsymmetricL => "asymmetric-l",
            Family::SkewedEllipsoid => "skewed-ellipsoid",
            Family::LatticeCube => "lattice-cube",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Family::ALL
            .into_iter()
            .find(|f| f.name() == key)
            .ok_or_else(|| Error::Argument(format!("unknown shape family {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapeSpec {
    pub family: Family,
    pub points: usize,
    pub noise: f64,
    pub label: usize,
}

fn helix<R: Rng>(n: usize, rng: &mut R) -> Vec<Point> {
    let rx = rng.gen_range(0.8..1.0);
    let ry = rx * rng.gen_range(0.5..0.7);
    let height = rx * rng.gen_range(3.2..4.0);
    let turns = rng.gen_range(2.0..3.0);
    (0..n)
        .map(|_| {
            let t: f64 = rng.gen();
            let a = 2.0 * PI * turns * t;
            [rx * a.cos(), ry * a.sin(), height * (t - 0.5)]
        })
        .collect()
}

fn asymmetric_l<R: Rng>(n: usize, rng: &mut R) -> Vec<Point> {
    // Long bar along x, shorter upright bar at one end, small fin on top.
    let len_x = rng.gen_range(1.6..2.0);
    let len_z = rng.gen_range(0.9..1.2);
    let boxes = [
        ([0.0, -0.15, 0.0], [len_x, 0.15, 0.3]),
        ([0.0, -0.12, 0.3], [0.3, 0.12, 0.3 + len_z]),
        ([0.3, 0.12, 0.3], [0.7, 0.3, 0.5]),
    ];
    let volumes: Vec<f64> = boxes
        .iter()
        .map(|(lo, hi)| (0..3).map(|k| hi[k] - lo[k]).product())
        .collect();
    let total: f64 = volumes.iter().sum();
    (0..n)
        .map(|_| {
            let mut u = rng.gen::<f64>() * total;
            let mut which = 0;
            while which + 1 < boxes.len() && u >= volumes[which] {
                u -= volumes[which];
                which += 1;
            }
            let (lo, hi) = boxes[which];
            [0, 1, 2].map(|k| rng.gen_range(lo[k]..hi[k]))
        })
        .collect()
}

fn skewed_ellipsoid<R: Rng>(n: usize, rng: &mut R) -> Vec<Point> {
    let b = rng.gen_range(0.55..0.7);
    let c = rng.gen_range(0.3..0.4);
    let bend = rng.gen_range(0.3..0.5);
    let taper = rng.gen_range(0.2..0.4);
    (0..n)
        .map(|_| {
            let mut u: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(rng));
            let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt().max(1e-12);
            u.iter_mut().for_each(|v| *v /= norm);
            let x = u[0];
            let y = b * u[1] * (1.0 + taper * x);
            let z = c * u[2] + bend * x * x;
            [x, y, z]
        })
        .collect()
}

fn lattice_cube(n: usize) -> Vec<Point> {
    let mut side = (n as f64).cbrt().floor() as usize;
    while (side + 1).pow(3) <= n {
        side += 1;
    }
    while side > 1 && side.pow(3) > n {
        side -= 1;
    }
    let side = side.max(2);
    let step = 2.0 / (side - 1) as f64;
    let mut pts = Vec::with_capacity(side.pow(3));
    for i in 0..side {
        for j in 0..side {
            for k in 0..side {
                pts.push([i, j, k].map(|v| -1.0 + step * v as f64));
            }
        }
    }
    pts
}

/// One shape of `spec.family`, centered and scaled to the unit ball.
/// The lattice cube ignores `noise` and has `⌊∛N⌋³` points.
pub fn generate_shape(spec: &SyntheticShapeSpec, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    if spec.points == 0 {
        return Err(Error::Argument("shape needs at least one point".into()));
    }
    let mut points = match spec.family {
        Family::Helix => helix(spec.points, rng),
        Family::AsymmetricL => asymmetric_l(spec.points, rng),
        Family::SkewedEllipsoid => skewed_ellipsoid(spec.points, rng),
        Family::LatticeCube => lattice_cube(spec.points),
    };
    if spec.noise > 0.0 && spec.family != Family::LatticeCube {
        let normal = Normal::new(0.0, spec.noise)
            .map_err(|e| Error::Argument(format!("noise: {e}")))?;
        for p in &mut points {
            p.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
    }
    Ok(PointCloud::new(points)?.normalized().with_label(spec.label))
}

/// Labeled clouds kept in memory.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub names: Vec<String>,
    pub clouds: Vec<PointCloud>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clouds.iter().map(|c| c.label().unwrap_or(0)).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.labels().into_iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            clouds: indices.iter().map(|&i| self.clouds[i].clone()).collect(),
        }
    }

    /// Stratified split: within each class, every `every`-th member goes to
    /// the test side.
    pub fn split(&self, every: usize) -> (Dataset, Dataset) {
        let every = every.max(2);
        let mut seen = vec![0usize; self.num_classes()];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, l) in self.labels().into_iter().enumerate() {
            seen[l] += 1;
            if seen[l].is_multiple_of(every) {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (self.subset(&train), self.subset(&test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataOptions {
    pub families: Vec<Family>,
    pub count: usize,
    pub points: usize,
    pub noise: f64,
    pub seed: u64,
    /// `ripc` or `xyz`.
    pub format: String,
}

impl Default for GenDataOptions {
    fn default() -> Self {
        GenDataOptions {
            families: Family::ALL.to_vec(),
            count: 200,
            points: 384,
            noise: 0.005,
            seed: 0,
            format: "ripc".into(),
        }
    }
}

/// Generates `count` shapes cycling through the families; sample `i` has
/// label `i mod families`. Each sample draws from its own stream, so the
/// result does not depend on scheduling.
pub fn generate_dataset(opts: &GenDataOptions) -> Result<Dataset> {
    if opts.families.is_empty() {
        return Err(Error::Argument("no shape families selected".into()));
    }
    let nf = opts.families.len();
    let clouds = (0..opts.count)
        .into_par_iter()
        .map(|i| {
            let spec = SyntheticShapeSpec {
                family: opts.families[i % nf],
                points: opts.points,
                noise: opts.noise,
                label: i % nf,
            };
            generate_shape(&spec, &mut derive_rng(opts.seed, &[0xda7a, i as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    let names = (0..opts.count)
        .map(|i| format!("{}_{i:05}.{}", opts.families[i % nf].name(), opts.format))
        .collect();
    Ok(Dataset { names, clouds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub options: GenDataOptions,
    pub files: usize,
    pub classes: Vec<String>,
}

/// Writes the clouds, `labels.csv` and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset, opts: &GenDataOptions) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data.names
        .par_iter()
        .zip(&data.clouds)
        .try_for_each(|(name, cloud)| write_cloud(&dir.join(name), cloud))?;
    let labels_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels_path).map_err(|e| csv_err(&labels_path, e))?;
    w.write_record(["filename", "label"]).map_err(|e| csv_err(&labels_path, e))?;
    for (name, cloud) in data.names.iter().zip(&data.clouds) {
        let label = cloud.label().unwrap_or(0).to_string();
        w.write_record([name.as_str(), label.as_str()])
            .map_err(|e| csv_err(&labels_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;
    let manifest = Manifest {
        options: opts.clone(),
        files: data.len(),
        classes: opts.families.iter().map(|f| f.name().to_string()).collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Loads a directory written by [`write_dataset`], in `labels.csv` order.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let labels_path = dir.join("labels.csv");
    let mut r = csv::Reader::from_path(&labels_path).map_err(|e| csv_err(&labels_path, e))?;
    let mut entries: Vec<(String, usize)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(&labels_path, e))?;
        let name = rec.get(0).unwrap_or_default().to_string();
        let label = rec
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("{}: bad label for {name}", labels_path.display())))?;
        entries.push((name, label));
    }
    let clouds = entries
        .par_iter()
        .map(|(name, label)| {
            let path: PathBuf = dir.join(name);
            Ok(read_cloud(&path)?.with_label(*label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        names: entries.into_iter().map(|(n, _)| n).collect(),
        clouds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("torus".parse::<Family>().is_err());
    }

    #[test]
    fn lattice_has_cube_count() {
        assert_eq!(lattice_cube(384).len(), 343);
        assert_eq!(lattice_cube(512).len(), 512);
        assert_eq!(lattice_cube(64).len(), 64);
    }

    #[test]
    fn shapes_are_normalized_and_labeled() {
        for (label, family) in Family::ALL.into_iter().enumerate() {
            let spec = SyntheticShapeSpec { family, points: 256, noise: 0.01, label };
            let c = generate_shape(&spec, &mut derive_rng(3, &[label as u64])).unwrap();
            assert_eq!(c.label(), Some(label));
            let centroid = c.centroid();
            assert!(centroid.iter().all(|v| v.abs() < 1e-12));
            let r = c.points().iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_disjoint() {
        let d = generate_dataset(&GenDataOptions { count: 20, points: 32, ..Default::default() }).unwrap();
        let (train, test) = d.split(5);
        assert_eq!((train.len(), test.len()), (16, 4));
        assert_eq!(d.num_classes(), 4);
    }
}
