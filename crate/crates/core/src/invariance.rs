//! Stage-by-stage rotation checks of a model against its own
//! recomputation on rotated inputs.

use rayon::prelude::*;
use serde::Serialize;

use crate::canonical::relative_rotation;
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::{Architecture, Config, MaeConfig};
use crate::data::Dataset;
use crate::embed::{analyze_cloud, position_feature, PatchGeometry};
use crate::error::{Error, Result};
use crate::mae::{
    ae_baseline_step, encode_all, init_encoder, init_predictor, latent_loss, make_mask,
    student_forward, teacher_forward, DualBranchState, MaskPlan,
};
use crate::params::{Binder, ParamStore};
use crate::pointcloud::PointCloud;
use crate::rotation::{frobenius_diff, mat_mul, random_rotation, RotationMatrix};
use crate::seed::derive_rng;
use crate::tensor::Tape;

/// Tolerance for the geometric stages (frames, canonical points).
pub const GEOMETRY_TOL: f64 = 1e-9;
/// Tolerance for the learned stages (embeddings, encoder, loss).
pub const MODEL_TOL: f64 = 1e-8;

const STREAM_ROT: u64 = 11;
const STREAM_MASK: u64 = 12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageResiduals {
    /// `max |p̄(XR) − p̄(X)|`
    pub canonical_points: f64,
    /// `max ‖R_i(XR) − R_i(X)·R‖_F`
    pub frame_equivariance: f64,
    /// `max ‖R_ij(XR) − R_ij(X)‖_F`
    pub relative_rotation: f64,
    /// Largest change of the point fed to the position embedding.
    pub position_feature: f64,
    pub encoder_output: f64,
    /// Latent loss under a fixed mask; absent without a predictor.
    pub latent_loss: Option<f64>,
}

impl StageResiduals {
    fn merge(&mut self, o: &StageResiduals) {
        self.canonical_points = self.canonical_points.max(o.canonical_points);
        self.frame_equivariance = self.frame_equivariance.max(o.frame_equivariance);
        self.relative_rotation = self.relative_rotation.max(o.relative_rotation);
        self.position_feature = self.position_feature.max(o.position_feature);
        self.encoder_output = self.encoder_output.max(o.encoder_output);
        self.latent_loss = match (self.latent_loss, o.latent_loss) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }

    /// `(stage, residual, tolerance)` rows.
    pub fn rows(&self) -> Vec<(&'static str, f64, f64)> {
        let mut rows = vec![
            ("canonical_points", self.canonical_points, GEOMETRY_TOL),
            ("frame_equivariance", self.frame_equivariance, GEOMETRY_TOL),
            ("relative_rotation", self.relative_rotation, GEOMETRY_TOL),
            ("position_feature", self.position_feature, MODEL_TOL),
            ("encoder_output", self.encoder_output, MODEL_TOL),
        ];
        if let Some(l) = self.latent_loss {
            rows.push(("latent_loss", l, MODEL_TOL));
        }
        rows
    }

    pub fn passed(&self) -> bool {
        self.rows().iter().all(|(_, r, tol)| *r < *tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub trials: usize,
    pub samples_checked: usize,
    /// Samples with any degenerate patch frame; excluded from the maxima.
    pub degenerate_samples: Vec<String>,
    pub residuals: StageResiduals,
    pub passed: bool,
}

impl InvarianceReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "trials {}  samples {}  degenerate {}\n",
            self.trials,
            self.samples_checked,
            self.degenerate_samples.len()
        );
        for (stage, r, tol) in self.residuals.rows() {
            let verdict = if r < tol { "ok" } else { "FAIL" };
            out.push_str(&format!("{stage:<20} {r:.3e}  tol {tol:.0e}  {verdict}\n"));
        }
        for name in &self.degenerate_samples {
            out.push_str(&format!("degenerate: {name}\n"));
        }
        out
    }
}

/// Parameters needed to evaluate the latent loss.
#[derive(Debug, Clone)]
pub struct LatentModel<'a> {
    pub student: &'a ParamStore,
    pub teacher: &'a ParamStore,
    pub predictor: &'a ParamStore,
    pub mae: &'a MaeConfig,
}

/// Latent loss of one cloud geometry under a fixed mask.
pub fn latent_loss_value(model: &LatentModel<'_>, geometry: &PatchGeometry, plan: &MaskPlan, arch: &Architecture) -> Result<f64> {
    let tape = Tape::new();
    let sb = Binder::new(&tape, model.student, false);
    let pb = Binder::new(&tape, model.predictor, false);
    let zs = student_forward(&sb, &pb, geometry, plan, arch, model.mae)?;
    let zt = tape.constant(teacher_forward(model.teacher, geometry, plan, arch, model.mae)?)?;
    tape.item(latent_loss(&tape, zs, zt)?)
}

/// Coordinate autoencoder loss of one cloud geometry under a fixed mask.
pub fn ae_loss_value(student: &ParamStore, decoder: &ParamStore, geometry: &PatchGeometry, plan: &MaskPlan, arch: &Architecture) -> Result<f64> {
    let tape = Tape::new();
    let sb = Binder::new(&tape, student, false);
    let db = Binder::new(&tape, decoder, false);
    tape.item(ae_baseline_step(&sb, &db, geometry, plan, arch)?)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn geometry_residuals(base: &PatchGeometry, turned: &PatchGeometry, r: &RotationMatrix, arch: &Architecture) -> StageResiduals {
    let mut s = StageResiduals::default();
    for (a, b) in base.frames.iter().zip(&turned.frames) {
        for (p, q) in a.canonical.iter().zip(&b.canonical) {
            s.canonical_points = s.canonical_points.max(max_abs(p, q));
        }
        let expected = mat_mul(a.rotation.matrix(), r.matrix());
        s.frame_equivariance = s.frame_equivariance.max(frobenius_diff(b.rotation.matrix(), &expected));
        s.position_feature = s
            .position_feature
            .max(max_abs(&position_feature(a, arch.position), &position_feature(b, arch.position)));
    }
    let (ra, rb) = (base.rotations(), turned.rotations());
    for i in 0..ra.len() {
        for j in 0..ra.len() {
            let d = frobenius_diff(
                relative_rotation(&ra[i], &ra[j]).matrix(),
                relative_rotation(&rb[i], &rb[j]).matrix(),
            );
            s.relative_rotation = s.relative_rotation.max(d);
        }
    }
    s
}

/// Shared rotation for trial `t`.
pub fn trial_rotation(seed: u64, t: usize) -> RotationMatrix {
    random_rotation(&mut derive_rng(seed, &[STREAM_ROT, t as u64]))
}

/// Fixed mask for sample `i`.
pub fn sample_plan(seed: u64, i: usize, g: usize, alpha: f64) -> Result<MaskPlan> {
    make_mask(g, alpha, &mut derive_rng(seed, &[STREAM_MASK, i as u64]))
}

#[allow(clippy::too_many_arguments)]
fn check_cloud(
    cloud: &PointCloud,
    index: usize,
    encoder: &ParamStore,
    latent: Option<&LatentModel<'_>>,
    arch: &Architecture,
    alpha: f64,
    trials: usize,
    seed: u64,
) -> Result<Option<StageResiduals>> {
    let base = analyze_cloud(cloud, arch.g, arch.k)?;
    if base.any_degenerate() {
        return Ok(None);
    }
    let z = encode_all(encoder, &base, arch)?;
    let plan = sample_plan(seed, index, arch.g, alpha)?;
    let loss = latent.map(|m| latent_loss_value(m, &base, &plan, arch)).transpose()?;
    let mut worst = StageResiduals::default();
    for t in 0..trials {
        let r = trial_rotation(seed, t);
        let turned = analyze_cloud(&cloud.rotated(&r), arch.g, arch.k)?;
        let mut s = geometry_residuals(&base, &turned, &r, arch);
        s.encoder_output = z.max_abs_diff(&encode_all(encoder, &turned, arch)?)?;
        if let (Some(m), Some(l0)) = (latent, loss) {
            s.latent_loss = Some((latent_loss_value(m, &turned, &plan, arch)? - l0).abs());
        }
        worst.merge(&s);
    }
    Ok(Some(worst))
}

/// Checks every stage over `trials` uniform rotations for each sample.
pub fn eval_invariance(checkpoint: &Checkpoint, data: &Dataset, trials: usize, seed: u64) -> Result<InvarianceReport> {
    if trials == 0 {
        return Err(Error::Argument("eval-invariance needs at least one trial".into()));
    }
    if data.is_empty() {
        return Err(Error::Argument("eval-invariance needs at least one cloud".into()));
    }
    let cfg = &checkpoint.manifest.config;
    let arch = cfg.architecture();
    let p = &checkpoint.params;
    let student = p.strip_prefix("student");
    let (teacher, predictor) = (p.strip_prefix("teacher"), p.strip_prefix("predictor"));
    let latent = (checkpoint.manifest.kind == CheckpointKind::DualBranch).then_some(LatentModel {
        student: &student,
        teacher: &teacher,
        predictor: &predictor,
        mae: &cfg.mae,
    });
    let per_sample: Vec<Option<StageResiduals>> = data
        .clouds
        .par_iter()
        .enumerate()
        .map(|(i, c)| check_cloud(c, i, &student, latent.as_ref(), &arch, cfg.mae.alpha, trials, seed))
        .collect::<Result<_>>()?;
    let mut residuals = StageResiduals::default();
    let mut degenerate = Vec::new();
    for (i, r) in per_sample.iter().enumerate() {
        match r {
            Some(r) => residuals.merge(r),
            None => degenerate.push(data.names[i].clone()),
        }
    }
    let checked = data.len() - degenerate.len();
    if checked == 0 {
        return Err(Error::Argument("every sample has a degenerate patch frame".into()));
    }
    Ok(InvarianceReport {
        trials,
        samples_checked: checked,
        degenerate_samples: degenerate,
        passed: residuals.passed(),
        residuals,
    })
}

/// Freshly initialized weights for both objectives, from one seed.
#[derive(Debug, Clone)]
pub struct LossStudyModels {
    pub dual: DualBranchState,
    pub ae_student: ParamStore,
    pub decoder: ParamStore,
}

impl LossStudyModels {
    pub fn random(cfg: &Config) -> Self {
        let arch = cfg.architecture();
        let mut rng = derive_rng(cfg.seed, &[STREAM_ROT, u64::MAX]);
        let dual = DualBranchState::init(&arch, &cfg.mae, &mut rng);
        let ae_student = init_encoder(&arch, &mut rng);
        let decoder = init_predictor(&arch, arch.k * 3, cfg.mae.mask_token_init, &mut rng);
        LossStudyModels { dual, ae_student, decoder }
    }

    /// Trained weights: a dual-branch checkpoint and an autoencoder one.
    pub fn from_checkpoints(dual: &Checkpoint, ae: &Checkpoint) -> Result<Self> {
        if dual.manifest.kind != CheckpointKind::DualBranch || ae.manifest.kind != CheckpointKind::Autoencoder {
            return Err(Error::Argument("expected a dual-branch and an autoencoder checkpoint".into()));
        }
        let p = &dual.params;
        Ok(LossStudyModels {
            dual: DualBranchState {
                student: p.strip_prefix("student"),
                teacher: p.strip_prefix("teacher"),
                predictor: p.strip_prefix("predictor"),
                ema_momentum: dual.manifest.ema_momentum,
                step: dual.manifest.step,
            },
            ae_student: ae.params.strip_prefix("student"),
            decoder: ae.params.strip_prefix("decoder"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossGapReport {
    pub samples: usize,
    pub degenerate: usize,
    /// `|l_rec(X) − l_rec(XR)|` per non-degenerate sample.
    pub ae_gaps: Vec<f64>,
    /// `|l(X) − l(XR)|` of the latent objective per non-degenerate sample.
    pub latent_gaps: Vec<f64>,
}

impl LossGapReport {
    pub fn ae_fraction_above(&self, threshold: f64) -> f64 {
        let n = self.ae_gaps.len().max(1) as f64;
        self.ae_gaps.iter().filter(|&&g| g > threshold).count() as f64 / n
    }

    pub fn latent_fraction_below(&self, threshold: f64) -> f64 {
        let n = self.latent_gaps.len().max(1) as f64;
        self.latent_gaps.iter().filter(|&&g| g < threshold).count() as f64 / n
    }

    pub fn mean_ae_gap(&self) -> f64 {
        self.ae_gaps.iter().sum::<f64>() / self.ae_gaps.len().max(1) as f64
    }
}

/// Evaluates both objectives on `X` and on one random `XR` per sample with
/// the same weights and mask.
pub fn loss_gap_study(models: &LossStudyModels, cfg: &Config, data: &Dataset, seed: u64) -> Result<LossGapReport> {
    let arch = cfg.architecture();
    let latent = LatentModel {
        student: &models.dual.student,
        teacher: &models.dual.teacher,
        predictor: &models.dual.predictor,
        mae: &cfg.mae,
    };
    let rows: Vec<Option<(f64, f64)>> = data
        .clouds
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let base = analyze_cloud(c, arch.g, arch.k)?;
            if base.any_degenerate() {
                return Ok(None);
            }
            let turned = analyze_cloud(&c.rotated(&trial_rotation(seed, i)), arch.g, arch.k)?;
            let plan = sample_plan(seed, i, arch.g, cfg.mae.alpha)?;
            let ae = |g: &PatchGeometry| ae_loss_value(&models.ae_student, &models.decoder, g, &plan, &arch);
            let lat = |g: &PatchGeometry| latent_loss_value(&latent, g, &plan, &arch);
            Ok(Some(((ae(&base)? - ae(&turned)?).abs(), (lat(&base)? - lat(&turned)?).abs())))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<(f64, f64)> = rows.iter().flatten().copied().collect();
    Ok(LossGapReport {
        samples: data.len(),
        degenerate: data.len() - kept.len(),
        ae_gaps: kept.iter().map(|r| r.0).collect(),
        latent_gaps: kept.iter().map(|r| r.1).collect(),
    })
}
