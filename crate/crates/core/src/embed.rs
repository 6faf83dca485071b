//! Transformer inputs built from patches: content tokens, relative
//! orientation embeddings and position embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::canonical::{canonicalize_points, relative_rotation};
use crate::config::{Architecture, PositionMode, TokenFrame, TOKENIZER_HIDDEN};
use crate::error::{Error, Result};
use crate::nn::{linear, mlp};
use crate::params::{Binder, Initializer, ParamStore};
use crate::pointcloud::{make_patches, Point, PointCloud};
use crate::rotation::RotationMatrix;
use crate::tensor::{Tensor, Var};

/// Standard deviation of the jitter used to retry a degenerate patch.
pub const JITTER_SIGMA: f64 = 1e-4;

/// How a patch frame was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStatus {
    Regular,
    /// Degenerate as given; the frame comes from a jittered copy.
    Rescued,
    /// Still degenerate after jitter; identity orientation substituted.
    Fallback,
}

/// Parameter-free description of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFrame {
    /// Canonical points `p̄_i` (identity frame on fallback).
    pub canonical: Vec<Point>,
    pub rotation: RotationMatrix,
    pub center: Point,
    /// Input-frame points relative to the center, `p − c_i`.
    pub local: Vec<Point>,
    pub status: FrameStatus,
}

/// Patch decomposition of one cloud with the frame of every patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGeometry {
    pub frames: Vec<PatchFrame>,
}

impl PatchGeometry {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn rotations(&self) -> Vec<RotationMatrix> {
        self.frames.iter().map(|f| f.rotation).collect()
    }

    pub fn centers(&self) -> Vec<Point> {
        self.frames.iter().map(|f| f.center).collect()
    }

    pub fn degenerate_mask(&self) -> Vec<bool> {
        self.frames.iter().map(|f| f.status != FrameStatus::Regular).collect()
    }

    pub fn any_degenerate(&self) -> bool {
        self.frames.iter().any(|f| f.status != FrameStatus::Regular)
    }

    /// Frames in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> PatchGeometry {
        PatchGeometry {
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
        }
    }
}

fn frame_for(points: &[Point], center: Point, center_index: usize) -> Result<PatchFrame> {
    let local: Vec<Point> = points
        .iter()
        .map(|p| [p[0] - center[0], p[1] - center[1], p[2] - center[2]])
        .collect();
    match canonicalize_points(points, center) {
        Ok(c) => Ok(PatchFrame {
            canonical: c.canonical_points,
            rotation: c.rotation,
            center,
            local,
            status: FrameStatus::Regular,
        }),
        Err(Error::DegenerateFrame(_)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6a17_7e4d ^ center_index as u64);
            let noise = Normal::new(0.0, JITTER_SIGMA).expect("positive sigma");
            let jittered: Vec<Point> = points
                .iter()
                .map(|p| p.map(|v| v + noise.sample(&mut rng)))
                .collect();
            match canonicalize_points(&jittered, center) {
                Ok(c) => Ok(PatchFrame {
                    canonical: c.canonical_points,
                    rotation: c.rotation,
                    center,
                    local,
                    status: FrameStatus::Rescued,
                }),
                Err(Error::DegenerateFrame(_)) => {
                    let centroid = centroid(points);
                    Ok(PatchFrame {
                        canonical: points
                            .iter()
                            .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
                            .collect(),
                        rotation: RotationMatrix::IDENTITY,
                        center,
                        local,
                        status: FrameStatus::Fallback,
                    })
                }
                Err(e) => Err(e),
            }
        }
        Err(e) => Err(e),
    }
}

fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

/// Patches a cloud and canonicalizes every patch. Degenerate patches are
/// retried once with jitter, then fall back to the identity frame; either
/// way they are flagged in [`PatchGeometry::degenerate_mask`].
pub fn analyze_cloud(cloud: &PointCloud, g: usize, k: usize) -> Result<PatchGeometry> {
    let patches = make_patches(cloud, g, k, 0)?;
    let frames = patches
        .iter()
        .map(|p| frame_for(&p.points, p.center, p.center_index))
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchGeometry { frames })
}

/// Point fed to the position embedding of a patch.
pub fn position_feature(frame: &PatchFrame, mode: PositionMode) -> Point {
    match mode {
        PositionMode::RotationInvariant => frame.rotation.transpose().apply(&frame.center),
        PositionMode::RawCenter | PositionMode::Off => frame.center,
    }
}

/// Row-major flattening of `R_ij` for every ordered pair, `n² × 9`.
/// Pairs touching a fallback patch use the identity.
pub fn pair_rotation_features(rotations: &[RotationMatrix], fallback: &[bool]) -> Result<Tensor> {
    let n = rotations.len();
    let mut data = Vec::with_capacity(n * n * 9);
    for i in 0..n {
        for j in 0..n {
            let rij = if fallback[i] || fallback[j] {
                RotationMatrix::IDENTITY
            } else {
                relative_rotation(&rotations[i], &rotations[j])
            };
            data.extend_from_slice(&rij.to_row_major());
        }
    }
    Tensor::new(&[n * n, 9], data)
}

/// Registers tokenizer and embedding parameters under `store`.
pub fn init_embedders(init: &mut Initializer<'_>, store: &mut ParamStore, arch: &Architecture, tokenizer: bool) {
    let d = arch.dim;
    if tokenizer {
        let [h1, h2] = TOKENIZER_HIDDEN;
        init.linear(store, "tokenizer.fc1", 3, h1, true);
        init.linear(store, "tokenizer.fc2", h1, h2, true);
        init.linear(store, "tokenizer.proj", h2, d, true);
        if arch.ori_embedding {
            init.linear(store, "ori.fc1", 9, d, true);
            init.linear(store, "ori.fc2", d, d, true);
        }
    }
    if arch.position != PositionMode::Off {
        init.linear(store, "pos.fc1", 3, d, true);
        init.linear(store, "pos.fc2", d, d, true);
    }
    if arch.ri_oe {
        init.linear(store, "orient.fc1", 9, d, true);
        init.linear(store, "orient.fc2", d, d, true);
    }
}

/// Mini-PointNet over a batch of patches, each `k` points: shared per-point
/// MLP, max-pool over the points of each patch, projection to width `D`.
/// The result has one row per patch.
pub fn tokenize_content(b: &Binder<'_>, patches: &[&[Point]]) -> Result<Var> {
    let k = patches.first().map(|p| p.len()).unwrap_or(0);
    if k == 0 || patches.iter().any(|p| p.len() != k) {
        return Err(Error::Shape("tokenize_content needs equal, non-empty patches".into()));
    }
    let data: Vec<f64> = patches.iter().flat_map(|p| p.iter().flatten().copied()).collect();
    let t = b.tape();
    let x = t.constant(Tensor::new(&[patches.len() * k, 3], data)?)?;
    let h = t.gelu(linear(b, "tokenizer.fc1", x)?)?;
    let h = t.gelu(linear(b, "tokenizer.fc2", h)?)?;
    let pooled = t.max_pool_rows(h, k)?;
    linear(b, "tokenizer.proj", pooled)
}

/// `r = MLP(vec(R))` for each row of an `n × 9` rotation table.
pub fn embed_orientations(b: &Binder<'_>, prefix: &str, table: Tensor) -> Result<Var> {
    let x = b.tape().constant(table)?;
    mlp(b, prefix, x)
}

/// Orientation embedding of a single relative rotation, `1 × D`.
pub fn embed_relative_orientation(b: &Binder<'_>, rij: &RotationMatrix) -> Result<Var> {
    embed_orientations(b, "orient", Tensor::new(&[1, 9], rij.to_row_major().to_vec())?)
}

/// Position embedding `MLP(c_i · R_iᵀ)` of a single patch, `1 × D`.
pub fn embed_position(b: &Binder<'_>, center: &Point, ri: &RotationMatrix) -> Result<Var> {
    let f = ri.transpose().apply(center);
    let x = b.tape().constant(Tensor::new(&[1, 3], f.to_vec())?)?;
    mlp(b, "pos", x)
}

/// Position embeddings of a list of frames under `mode` (`None` when off).
pub fn embed_positions(b: &Binder<'_>, frames: &[&PatchFrame], mode: PositionMode) -> Result<Option<Var>> {
    if mode == PositionMode::Off {
        return Ok(None);
    }
    let data: Vec<f64> = frames
        .iter()
        .flat_map(|f| position_feature(f, mode))
        .collect();
    let x = b.tape().constant(Tensor::new(&[frames.len(), 3], data)?)?;
    Ok(Some(mlp(b, "pos", x)?))
}

/// The three encoder inputs for a set of patches, bound to one tape.
#[derive(Debug, Clone)]
pub struct PatchTokens {
    /// Content tokens `t̄_i`, `n × D`.
    pub tokens: Var,
    /// Position embeddings, `n × D`; absent when disabled.
    pub ripos: Option<Var>,
    pub rotations: Vec<RotationMatrix>,
    pub centers: Vec<Point>,
    pub degenerate_mask: Vec<bool>,
    /// Patches using the identity fallback frame.
    pub fallback: Vec<bool>,
}

impl PatchTokens {
    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }
}

/// Builds tokens and position embeddings for `geometry` with the encoder
/// parameters in `b`.
pub fn build_patch_tokens(b: &Binder<'_>, geometry: &PatchGeometry, arch: &Architecture) -> Result<PatchTokens> {
    let frames: Vec<&PatchFrame> = geometry.frames.iter().collect();
    let point_sets: Vec<&[Point]> = frames
        .iter()
        .map(|f| match arch.tokens {
            TokenFrame::Canonical => f.canonical.as_slice(),
            TokenFrame::Raw => f.local.as_slice(),
        })
        .collect();
    let mut tokens = tokenize_content(b, &point_sets)?;
    if arch.ori_embedding {
        let data: Vec<f64> = frames.iter().flat_map(|f| f.rotation.to_row_major()).collect();
        let ori = embed_orientations(b, "ori", Tensor::new(&[frames.len(), 9], data)?)?;
        tokens = b.tape().add(tokens, ori)?;
    }
    let ripos = embed_positions(b, &frames, arch.position)?;
    Ok(PatchTokens {
        tokens,
        ripos,
        rotations: geometry.rotations(),
        centers: geometry.centers(),
        degenerate_mask: geometry.degenerate_mask(),
        fallback: frames.iter().map(|f| f.status == FrameStatus::Fallback).collect(),
    })
}

/// Convenience: patch, canonicalize and embed a cloud in one call.
pub fn embed_cloud(b: &Binder<'_>, cloud: &PointCloud, arch: &Architecture) -> Result<PatchTokens> {
    let geometry = analyze_cloud(cloud, arch.g, arch.k)?;
    build_patch_tokens(b, &geometry, arch)
}
