//! Dual-branch masked pretraining in latent space.
//!
//! The student encodes visible patches only; a shallow predictor fills in
//! mask tokens and regresses the teacher's encodings of the masked patches.
//! The teacher sees every patch, never receives gradients, and tracks the
//! student by exponential moving average. A coordinate-space autoencoder
//! objective is kept alongside for comparison.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Architecture, EmaSchedule, MaeConfig};
use crate::embed::{build_patch_tokens, embed_positions, init_embedders, PatchFrame, PatchGeometry};
use crate::error::{Error, Result};
use crate::nn::{linear, LAYERNORM_EPS};
use crate::params::{Binder, Initializer, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::transformer::{encode_patches, init_blocks, ri_transformer, EncoderConfig};

/// Split of the patch indices into visible and masked sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub alpha: f64,
}

/// `floor(alpha·g)`
pub fn masked_count(g: usize, alpha: f64) -> usize {
    (alpha * g as f64).floor() as usize
}

impl MaskPlan {
    /// Explicit plan; the two sets must partition `0..g`.
    pub fn new(visible: Vec<usize>, masked: Vec<usize>, g: usize) -> Result<Self> {
        let mut seen = vec![false; g];
        for &i in visible.iter().chain(&masked) {
            if i >= g || seen[i] {
                return Err(Error::Argument(format!("mask plan index {i} repeated or out of 0..{g}")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Argument("mask plan does not cover every patch".into()));
        }
        if visible.is_empty() || masked.is_empty() {
            return Err(Error::Argument("mask plan needs visible and masked patches".into()));
        }
        let alpha = masked.len() as f64 / g as f64;
        Ok(MaskPlan { visible, masked, alpha })
    }

    pub fn g(&self) -> usize {
        self.visible.len() + self.masked.len()
    }
}

/// Uniformly random plan masking `floor(alpha·g)` patches. Both index lists
/// come back sorted.
pub fn make_mask<R: Rng + ?Sized>(g: usize, alpha: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("mask ratio {alpha} outside (0, 1)")));
    }
    let m = masked_count(g, alpha);
    if m == 0 || m >= g {
        return Err(Error::Argument(format!("mask ratio {alpha} masks {m} of {g} patches")));
    }
    let mut order: Vec<usize> = (0..g).collect();
    order.shuffle(rng);
    let mut masked = order[..m].to_vec();
    let mut visible = order[m..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan { visible, masked, alpha })
}

/// Encoder parameters: tokenizer, embedders and blocks.
pub fn init_encoder(arch: &Architecture, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(rng);
    init_embedders(&mut init, &mut store, arch, true);
    init_blocks(&mut init, &mut store, &EncoderConfig::encoder(arch));
    store
}

/// Predictor (or coordinate decoder) parameters: its own position and
/// orientation embedders, `predictor_depth` blocks, an output head of width
/// `out_dim` and the shared mask token.
pub fn init_predictor(arch: &Architecture, out_dim: usize, mask_token_std: f64, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(rng);
    init_embedders(&mut init, &mut store, arch, false);
    init_blocks(&mut init, &mut store, &EncoderConfig::predictor(arch));
    init.linear(&mut store, "head", arch.dim, out_dim, true);
    init.normal(&mut store, "mask_token", &[1, arch.dim], mask_token_std);
    store
}

/// Student, teacher and predictor parameters with the EMA bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBranchState {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub predictor: ParamStore,
    pub ema_momentum: f64,
    pub step: u64,
}

impl DualBranchState {
    /// Student and teacher start from the same draw.
    pub fn init(arch: &Architecture, mae: &MaeConfig, rng: &mut ChaCha8Rng) -> Self {
        let student = init_encoder(arch, rng);
        let predictor = init_predictor(arch, arch.dim, mae.mask_token_init, rng);
        DualBranchState {
            teacher: student.detached(),
            student,
            predictor,
            ema_momentum: mae.ema_m0,
            step: 0,
        }
    }

    pub fn mask_token(&self) -> Option<&Tensor> {
        self.predictor.get("mask_token")
    }
}

/// Runs the predictor (or decoder) over `[encoded visible; mask tokens]`
/// and returns its head output at the masked rows, in plan order.
pub fn predictor_forward(
    pred: &Binder<'_>,
    encoded_visible: Var,
    geometry: &PatchGeometry,
    plan: &MaskPlan,
    arch: &Architecture,
    masked_orientation: bool,
) -> Result<Var> {
    let t = pred.tape();
    let (v, m) = (plan.visible.len(), plan.masked.len());
    let mask_rows = t.gather_rows(pred.param("mask_token")?, &vec![0; m])?;
    let x = t.concat_rows(&[encoded_visible, mask_rows])?;
    let order: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
    let frames: Vec<&PatchFrame> = order.iter().map(|&i| &geometry.frames[i]).collect();
    let pos = embed_positions(pred, &frames, arch.position)?;
    let rotations: Vec<_> = frames.iter().map(|f| f.rotation).collect();
    let fallback: Vec<bool> = frames
        .iter()
        .enumerate()
        .map(|(row, f)| {
            f.status == crate::embed::FrameStatus::Fallback || (row >= v && !masked_orientation)
        })
        .collect();
    let y = ri_transformer(
        pred,
        x,
        pos,
        &rotations,
        &fallback,
        &EncoderConfig::predictor(arch),
        arch.ri_oe,
    )?;
    let rows: Vec<usize> = (v..v + m).collect();
    let y = t.gather_rows(y, &rows)?;
    linear(pred, "head", y)
}

/// Encodes the visible patches with the student.
pub fn encode_visible(student: &Binder<'_>, geometry: &PatchGeometry, plan: &MaskPlan, arch: &Architecture) -> Result<Var> {
    let visible = geometry.select(&plan.visible);
    let pt = build_patch_tokens(student, &visible, arch)?;
    encode_patches(student, &pt, arch)
}

/// Student branch: predictions `Z̄ˢ` for the masked patches, `M × D`.
pub fn student_forward(
    student: &Binder<'_>,
    predictor: &Binder<'_>,
    geometry: &PatchGeometry,
    plan: &MaskPlan,
    arch: &Architecture,
    mae: &MaeConfig,
) -> Result<Var> {
    check_plan(geometry, plan)?;
    let z_visible = encode_visible(student, geometry, plan, arch)?;
    predictor_forward(predictor, z_visible, geometry, plan, arch, mae.masked_orientation)
}

fn check_plan(geometry: &PatchGeometry, plan: &MaskPlan) -> Result<()> {
    if plan.g() != geometry.len() {
        return Err(Error::Argument(format!(
            "mask plan over {} patches, geometry has {}",
            plan.g(),
            geometry.len()
        )));
    }
    if plan.masked.is_empty() {
        return Err(Error::Argument("mask plan has no masked patches".into()));
    }
    Ok(())
}

/// Full-set encoding of every patch with frozen parameters, `G × D`.
pub fn encode_all(params: &ParamStore, geometry: &PatchGeometry, arch: &Architecture) -> Result<Tensor> {
    let tape = Tape::new();
    let b = Binder::new(&tape, params, false);
    let pt = build_patch_tokens(&b, geometry, arch)?;
    let z = encode_patches(&b, &pt, arch)?;
    tape.value(z)
}

/// Teacher branch: targets `Z̄ᵗ`, the teacher encodings of the masked
/// patches in plan order. Computed off the student's tape, so no gradient
/// can reach the teacher.
pub fn teacher_forward(
    teacher: &ParamStore,
    geometry: &PatchGeometry,
    plan: &MaskPlan,
    arch: &Architecture,
    mae: &MaeConfig,
) -> Result<Tensor> {
    check_plan(geometry, plan)?;
    let full = encode_all(teacher, geometry, arch)?;
    let d = full.cols();
    let mut data = Vec::with_capacity(plan.masked.len() * d);
    for &i in &plan.masked {
        data.extend_from_slice(full.row(i));
    }
    let mut targets = Tensor::new(&[plan.masked.len(), d], data)?;
    if mae.target_layernorm {
        normalize_rows(&mut targets);
    }
    Ok(targets)
}

fn normalize_rows(t: &mut Tensor) {
    let d = t.cols();
    for row in t.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
}

/// `(1/M) Σ ‖z̄ᵗ_i − z̄ˢ_i‖²`
pub fn latent_loss(tape: &Tape, predictions: Var, targets: Var) -> Result<Var> {
    tape.mse(predictions, targets)
}

/// Mean over feature dimensions of the variance across rows.
pub fn embedding_variance(z: &Tensor) -> f64 {
    let (m, d) = (z.rows(), z.cols());
    if m < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..d {
        let mean = (0..m).map(|r| z.at(r, c)).sum::<f64>() / m as f64;
        total += (0..m).map(|r| (z.at(r, c) - mean).powi(2)).sum::<f64>() / m as f64;
    }
    total / d as f64
}

/// Momentum at `step` of `total`: constant, or a cosine ramp from `m0` to 1.
pub fn ema_momentum(m0: f64, step: u64, total: u64, schedule: EmaSchedule) -> f64 {
    match schedule {
        EmaSchedule::Constant => m0,
        EmaSchedule::Cosine => {
            if total == 0 {
                return m0;
            }
            let frac = (step.min(total) as f64) / total as f64;
            1.0 - (1.0 - m0) * (std::f64::consts::PI * frac).cos().mul_add(0.5, 0.5)
        }
    }
}

/// `θᵗ ← m·θᵗ + (1−m)·θˢ` for every parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    if !teacher.same_structure(student) {
        return Err(Error::Internal("teacher and student trees differ".into()));
    }
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}

/// Masked patch coordinates relative to their centers, in the input frame,
/// `(M·K) × 3`.
pub fn masked_coordinates(geometry: &PatchGeometry, plan: &MaskPlan) -> Result<Tensor> {
    let k = geometry.frames[0].local.len();
    let data: Vec<f64> = plan
        .masked
        .iter()
        .flat_map(|&i| geometry.frames[i].local.iter().flatten().copied())
        .collect();
    Tensor::new(&[plan.masked.len() * k, 3], data)
}

/// Coordinate-space autoencoder loss: the decoder's head predicts `K × 3`
/// points per masked patch, scored by Chamfer-L2 against the masked patch
/// in the input frame. With an invariant encoder the prediction cannot
/// follow a rotation of the input while the target does.
pub fn ae_baseline_step(
    student: &Binder<'_>,
    decoder: &Binder<'_>,
    geometry: &PatchGeometry,
    plan: &MaskPlan,
    arch: &Architecture,
) -> Result<Var> {
    check_plan(geometry, plan)?;
    let t = student.tape();
    let z_visible = encode_visible(student, geometry, plan, arch)?;
    let out = predictor_forward(decoder, z_visible, geometry, plan, arch, true)?;
    let k = arch.k;
    let points = t.reshape(out, &[plan.masked.len() * k, 3])?;
    let target = t.constant(masked_coordinates(geometry, plan)?)?;
    t.chamfer(points, target, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mask_sizes_follow_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = make_mask(64, 0.6, &mut rng).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (38, 26));
        let p = make_mask(16, 0.6, &mut rng).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (9, 7));
        let mut all: Vec<usize> = p.visible.iter().chain(&p.masked).copied().collect();
        all.sort();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert!(make_mask(16, 0.05, &mut rng).is_err());
        assert!(make_mask(16, 1.0, &mut rng).is_err());
    }

    #[test]
    fn mask_is_reproducible() {
        let a = make_mask(32, 0.6, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = make_mask(32, 0.6, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn explicit_plan_validation() {
        assert!(MaskPlan::new(vec![1], vec![2, 0], 3).is_ok());
        assert!(MaskPlan::new(vec![1, 1], vec![0], 3).is_err());
        assert!(MaskPlan::new(vec![1], vec![0], 3).is_err());
        assert!(MaskPlan::new(vec![0, 1, 2], vec![], 3).is_err());
    }

    #[test]
    fn ema_arithmetic() {
        let mut teacher = ParamStore::new();
        teacher.insert("w", Tensor::scalar(1.0));
        let mut student = ParamStore::new();
        student.insert("w", Tensor::scalar(0.0));
        let mut t = teacher.clone();
        ema_update(&mut t, &student, 0.99).unwrap();
        assert!((t.get("w").unwrap().item() - 0.99).abs() < 1e-15);
        let mut t = teacher.clone();
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t.get("w").unwrap().item(), 1.0);
        let mut t = teacher.clone();
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t.get("w").unwrap().item(), 0.0);
        let mut other = ParamStore::new();
        other.insert("v", Tensor::scalar(0.0));
        assert!(ema_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn momentum_schedule_endpoints() {
        assert!((ema_momentum(0.996, 0, 100, EmaSchedule::Cosine) - 0.996).abs() < 1e-15);
        assert!((ema_momentum(0.996, 100, 100, EmaSchedule::Cosine) - 1.0).abs() < 1e-15);
        let mid = ema_momentum(0.996, 50, 100, EmaSchedule::Cosine);
        assert!((mid - 0.998).abs() < 1e-12);
        assert_eq!(ema_momentum(0.9, 70, 100, EmaSchedule::Constant), 0.9);
    }

    #[test]
    fn latent_loss_values() {
        let tape = Tape::new();
        let zt = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let zs = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(tape.item(latent_loss(&tape, zs, zt).unwrap()).unwrap(), 1.0);
        assert_eq!(tape.item(latent_loss(&tape, zt, zt).unwrap()).unwrap(), 0.0);
        let bad = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(latent_loss(&tape, zs, bad).is_err());
    }
}
