//! Pretraining loop, classification heads, probing, fine-tuning and the
//! rotation-scenario evaluations.
//!
//! Every random draw of step `s` comes from a stream keyed by the run seed
//! and `s` (and the sample slot within the batch), and per-sample gradients
//! are reduced in batch order. A run is therefore bit-reproducible no
//! matter how many worker threads execute it.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointKind, CheckpointManifest};
use crate::config::{Architecture, Config, RotationKind, Scenario, HEAD_HIDDEN};
use crate::data::Dataset;
use crate::embed::{analyze_cloud, build_patch_tokens, PatchGeometry};
use crate::error::{Error, Result};
use crate::mae::{
    ae_baseline_step, embedding_variance, ema_momentum, ema_update, encode_all, init_encoder,
    init_predictor, latent_loss, make_mask, student_forward, teacher_forward, DualBranchState,
};
use crate::nn::mlp;
use crate::optim::{adamw_step, AdamWConfig, LrSchedule, OptimState};
use crate::params::{Binder, Initializer, ParamStore};
use crate::pointcloud::PointCloud;
use crate::rotation::RotationMatrix;
use crate::seed::derive_rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::transformer::encode_patches;

const STREAM_INIT: u64 = 1;
const STREAM_EPOCH: u64 = 2;
const STREAM_STEP: u64 = 3;
const STREAM_TRAIN_AUG: u64 = 4;
const STREAM_TEST_ROT: u64 = 5;
const STREAM_HEAD: u64 = 6;
const STREAM_EPISODE: u64 = 7;

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    /// Mean over samples of the across-patch variance of the teacher
    /// targets. NaN for the autoencoder objective, which has no teacher.
    pub teacher_variance: f64,
    pub lr: f64,
    pub momentum: f64,
}

pub fn loss_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,loss,teacher_variance,lr,m\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss, r.teacher_variance, r.lr, r.momentum
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
}

/// Step budget derived from the config: `epochs × ⌈n / batch⌉` unless
/// overridden, with the warm-up taking the same fraction of the run as
/// `warmup_epochs / epochs`.
pub fn schedule_for(cfg: &Config, n: usize, steps: Option<u64>) -> LrSchedule {
    let per_epoch = n.div_ceil(cfg.optim.batch).max(1) as u64;
    let total = steps.unwrap_or(cfg.optim.epochs as u64 * per_epoch);
    let warmup = (total as f64 * cfg.optim.warmup_epochs as f64 / cfg.optim.epochs as f64).round() as u64;
    LrSchedule { base_lr: cfg.optim.base_lr, warmup, total }
}

fn adamw_config(cfg: &Config) -> AdamWConfig {
    AdamWConfig {
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
        weight_decay: cfg.optim.weight_decay,
    }
}

/// Indices of the batch used at `step`: a fresh permutation each epoch.
pub fn batch_indices(cfg: &Config, n: usize, step: u64) -> Vec<usize> {
    let batch = cfg.optim.batch.min(n).max(1);
    let per_epoch = n.div_ceil(batch) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(cfg.seed, &[STREAM_EPOCH, epoch]));
    order[pos * batch..((pos + 1) * batch).min(n)].to_vec()
}

/// Patch geometry of `cloud` after a rotation drawn from `kind`.
fn rotated_geometry(cloud: &PointCloud, kind: RotationKind, rng: &mut rand_chacha::ChaCha8Rng, arch: &Architecture) -> Result<PatchGeometry> {
    let r = kind.sample(rng);
    analyze_cloud(&cloud.rotated(&r), arch.g, arch.k)
}

struct SampleOut {
    loss: f64,
    variance: f64,
    grads: ParamStore,
}

fn add_into(acc: &mut ParamStore, g: &ParamStore, scale: f64) {
    for ((_, a), (_, b)) in acc.iter_mut().zip(g.iter()) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += scale * y;
        }
    }
}

fn merged(parts: &[(&str, &ParamStore)]) -> ParamStore {
    let mut out = ParamStore::new();
    for (prefix, store) in parts {
        store.merge_prefixed(prefix, &mut out);
    }
    out
}

/// Runs `per_sample` over the batch in parallel and averages the results
/// in batch order.
fn reduce_batch<F>(batch: &[usize], like: &ParamStore, per_sample: F) -> Result<(f64, f64, ParamStore)>
where
    F: Fn(usize, usize) -> Result<SampleOut> + Sync,
{
    let outs: Vec<Result<SampleOut>> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, &idx)| per_sample(slot, idx))
        .collect();
    let n = batch.len() as f64;
    let mut grads = like.zeros_like();
    let (mut loss, mut variance) = (0.0, 0.0);
    for out in outs {
        let out = out?;
        loss += out.loss / n;
        variance += out.variance / n;
        add_into(&mut grads, &out.grads, 1.0 / n);
    }
    Ok((loss, variance, grads))
}

/// Dual-branch (or autoencoder, per `ablation.dual_branch`) pretraining.
/// `steps` overrides the epoch-derived budget; `resume` continues from a
/// checkpoint written by an earlier call with the same config.
pub fn pretrain(dataset: &Dataset, cfg: &Config, steps: Option<u64>, resume: Option<&Checkpoint>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("pretraining needs at least one cloud".into()));
    }
    let arch = cfg.architecture();
    let dual = cfg.ablation.dual_branch;
    let head_prefix = if dual { "predictor" } else { "decoder" };
    let schedule = schedule_for(cfg, dataset.len(), steps);

    let mut init_rng = derive_rng(cfg.seed, &[STREAM_INIT]);
    let (mut trainable, mut teacher, start, mut opt) = match resume {
        Some(ck) => {
            if ck.manifest.config != *cfg {
                return Err(Error::Argument("resume checkpoint was written with a different config".into()));
            }
            let p = &ck.params;
            let trainable = merged(&[("student", &p.strip_prefix("student")), (head_prefix, &p.strip_prefix(head_prefix))]);
            let mut opt = OptimState::new(&trainable, schedule, adamw_config(cfg));
            opt.m = p.strip_prefix("opt.m");
            opt.v = p.strip_prefix("opt.v");
            opt.step = ck.manifest.step;
            if !opt.m.same_structure(&trainable) || !opt.v.same_structure(&trainable) {
                return Err(Error::Format("checkpoint optimizer state does not match parameters".into()));
            }
            let teacher = dual.then(|| p.strip_prefix("teacher"));
            (trainable, teacher, ck.manifest.step, opt)
        }
        None => {
            let (student, head, teacher) = if dual {
                let s = DualBranchState::init(&arch, &cfg.mae, &mut init_rng);
                (s.student, s.predictor, Some(s.teacher))
            } else {
                let student = init_encoder(&arch, &mut init_rng);
                let decoder = init_predictor(&arch, arch.k * 3, cfg.mae.mask_token_init, &mut init_rng);
                (student, decoder, None)
            };
            let trainable = merged(&[("student", &student), (head_prefix, &head)]);
            let opt = OptimState::new(&trainable, schedule, adamw_config(cfg));
            (trainable, teacher, 0, opt)
        }
    };

    let mut history = Vec::new();
    let mut momentum = resume.map_or(cfg.mae.ema_m0, |c| c.manifest.ema_momentum);
    for step in start..schedule.total {
        let batch = batch_indices(cfg, dataset.len(), step);
        let student = trainable.strip_prefix("student");
        let head = trainable.strip_prefix(head_prefix);
        let teacher_ref = teacher.as_ref();
        let (loss, variance, g) = reduce_batch(&batch, &trainable, |slot, idx| {
            let mut rng = derive_rng(cfg.seed, &[STREAM_STEP, step, slot as u64]);
            let geometry = rotated_geometry(&dataset.clouds[idx], cfg.scenario.train_rotation(), &mut rng, &arch)?;
            let plan = make_mask(arch.g, cfg.mae.alpha, &mut rng)?;
            let tape = Tape::new();
            let mut sb = Binder::new(&tape, &student, true);
            let mut hb = Binder::new(&tape, &head, true);
            if arch.dropout > 0.0 {
                sb = sb.with_dropout(derive_rng(cfg.seed, &[STREAM_STEP, step, slot as u64, 1]));
                hb = hb.with_dropout(derive_rng(cfg.seed, &[STREAM_STEP, step, slot as u64, 2]));
            }
            let (loss, variance) = match teacher_ref {
                Some(t) => {
                    let zs = student_forward(&sb, &hb, &geometry, &plan, &arch, &cfg.mae)?;
                    let targets = teacher_forward(t, &geometry, &plan, &arch, &cfg.mae)?;
                    let variance = embedding_variance(&targets);
                    (latent_loss(&tape, zs, tape.constant(targets)?)?, variance)
                }
                None => (ae_baseline_step(&sb, &hb, &geometry, &plan, &arch)?, f64::NAN),
            };
            let value = tape.item(loss)?;
            let grads = tape.backward(loss)?;
            Ok(SampleOut {
                loss: value,
                variance,
                grads: merged(&[("student", &sb.gradients(&grads)), (head_prefix, &hb.gradients(&grads))]),
            })
        })
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("step {step}: loss is {loss}")));
        }
        let lr = adamw_step(&mut trainable, &g, &mut opt)?;
        if let Some(t) = teacher.as_mut() {
            momentum = ema_momentum(cfg.mae.ema_m0, step + 1, schedule.total, cfg.mae.ema_schedule);
            ema_update(t, &trainable.strip_prefix("student"), momentum)?;
        }
        if step % 25 == 0 || step + 1 == schedule.total {
            log::info!("step {step} loss {loss:.6} var {variance:.3e} lr {lr:.3e} m {momentum:.5}");
        }
        history.push(StepRecord { step, loss, teacher_variance: variance, lr, momentum });
    }

    let mut params = trainable.clone();
    if let Some(t) = &teacher {
        t.merge_prefixed("teacher", &mut params);
    }
    opt.m.merge_prefixed("opt.m", &mut params);
    opt.v.merge_prefixed("opt.v", &mut params);
    let checkpoint = Checkpoint {
        manifest: CheckpointManifest {
            kind: if dual { CheckpointKind::DualBranch } else { CheckpointKind::Autoencoder },
            config: cfg.clone(),
            step: opt.step,
            seed: cfg.seed,
            ema_momentum: momentum,
        },
        params,
    };
    Ok(PretrainOutcome { checkpoint, history })
}

/// Untrained encoder checkpoint, for baselines and tests.
pub fn random_encoder_checkpoint(cfg: &Config) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut rng = derive_rng(cfg.seed, &[STREAM_INIT]);
    let student = init_encoder(&cfg.architecture(), &mut rng);
    let mut params = ParamStore::new();
    student.merge_prefixed("student", &mut params);
    Ok(Checkpoint {
        manifest: CheckpointManifest {
            kind: CheckpointKind::Encoder,
            config: cfg.clone(),
            step: 0,
            seed: cfg.seed,
            ema_momentum: cfg.mae.ema_m0,
        },
        params,
    })
}

/// `[mean over patches, max over patches]`, `1 × 2D`.
pub fn pool_latents(tape: &Tape, z: Var) -> Result<Var> {
    let g = tape.shape(z)?[0];
    let mean = tape.mean_rows(z)?;
    let max = tape.max_pool_rows(z, g)?;
    tape.concat_cols(&[mean, max])
}

fn pool_values(z: &Tensor) -> Vec<f64> {
    let (g, d) = (z.rows(), z.cols());
    let mut out = vec![0.0; 2 * d];
    for c in 0..d {
        let col = (0..g).map(|r| z.at(r, c));
        out[c] = col.clone().sum::<f64>() / g as f64;
        out[d + c] = col.fold(f64::NEG_INFINITY, f64::max);
    }
    out
}

/// Classification MLP `2D → 256 → classes` under the name `cls`.
pub fn init_head(in_dim: usize, classes: usize, rng: &mut rand_chacha::ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(rng);
    init.linear(&mut store, "cls.fc1", in_dim, HEAD_HIDDEN, true);
    init.linear(&mut store, "cls.fc2", HEAD_HIDDEN, classes, true);
    store
}

/// Pools encoder latents (`G × D`) and applies the classification MLP.
pub fn classify_head(b: &Binder<'_>, latents: Var) -> Result<Var> {
    let pooled = pool_latents(b.tape(), latents)?;
    mlp(b, "cls", pooled)
}

/// Frozen encoder plus trained head. Features are standardized with
/// `mean`/`scale` before the head (identity after fine-tuning).
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: ParamStore,
    pub head: ParamStore,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub arch: Architecture,
}

/// Pooled features of one cloud and whether any patch frame was degenerate.
pub fn cloud_features(encoder: &ParamStore, cloud: &PointCloud, arch: &Architecture) -> Result<(Vec<f64>, bool)> {
    let geometry = analyze_cloud(cloud, arch.g, arch.k)?;
    let z = encode_all(encoder, &geometry, arch)?;
    Ok((pool_values(&z), geometry.any_degenerate()))
}

fn head_logits(head: &ParamStore, rows: &[Vec<f64>]) -> Result<Tensor> {
    let tape = Tape::new();
    let b = Binder::new(&tape, head, false);
    let x = tape.constant(Tensor::from_rows(rows)?)?;
    tape.value(mlp(&b, "cls", x)?)
}

impl Classifier {
    pub fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn logits_from_features(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(head_logits(&self.head, &[self.standardize(features)])?.into_data())
    }

    /// Logits and the degenerate flag for one cloud.
    pub fn predict(&self, cloud: &PointCloud) -> Result<(Vec<f64>, bool)> {
        let (f, degenerate) = cloud_features(&self.encoder, cloud, &self.arch)?;
        Ok((self.logits_from_features(&f)?, degenerate))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Train the head only on clouds whose patch frames are all regular.
    /// Degenerate clouds have rotation-dependent features, so keeping them
    /// makes the head depend on the scenario. Classes made only of
    /// degenerate clouds are then never learned.
    pub exclude_degenerate: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { steps: 400, lr: 2e-3, weight_decay: 0.0, exclude_degenerate: false }
    }
}

/// Trains the head alone on fixed features with full-batch AdamW.
pub fn train_head(features: &[Vec<f64>], labels: &[usize], classes: usize, probe: &ProbeConfig, seed: u64) -> Result<(ParamStore, Vec<f64>, Vec<f64>)> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Argument("head training needs labeled features".into()));
    }
    let d = features[0].len();
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..d).map(|c| features.iter().map(|f| f[c]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|c| {
            let var = features.iter().map(|f| (f[c] - mean[c]).powi(2)).sum::<f64>() / n;
            1.0 / (var.sqrt() + 1e-6)
        })
        .collect();
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| (0..d).map(|c| (f[c] - mean[c]) * scale[c]).collect())
        .collect();
    let x = Tensor::from_rows(&x)?;
    let mut head = init_head(d, classes, &mut derive_rng(seed, &[STREAM_HEAD]));
    let schedule = LrSchedule { base_lr: probe.lr, warmup: 0, total: probe.steps as u64 };
    let hyper = AdamWConfig { weight_decay: probe.weight_decay, ..Default::default() };
    let mut opt = OptimState::new(&head, schedule, hyper);
    for _ in 0..probe.steps {
        let tape = Tape::new();
        let b = Binder::new(&tape, &head, true);
        let logits = mlp(&b, "cls", tape.constant(x.clone())?)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?;
        let g = b.gradients(&grads);
        adamw_step(&mut head, &g, &mut opt)?;
    }
    Ok((head, mean, scale))
}

/// Rotation drawn for sample `i` of a split under `kind`.
pub fn sample_rotation(seed: u64, stream: u64, i: usize, kind: RotationKind) -> RotationMatrix {
    kind.sample(&mut derive_rng(seed, &[stream, i as u64]))
}

/// Features of every cloud after its own rotation from `kind`.
pub fn dataset_features(encoder: &ParamStore, data: &Dataset, arch: &Architecture, kind: RotationKind, seed: u64, stream: u64) -> Result<Vec<(Vec<f64>, bool)>> {
    data.clouds
        .par_iter()
        .enumerate()
        .map(|(i, c)| cloud_features(encoder, &c.rotated(&sample_rotation(seed, stream, i, kind)), arch))
        .collect()
}

/// Linear probe: frozen encoder, head trained on train-scenario rotations.
pub fn linear_probe(encoder: &ParamStore, train: &Dataset, arch: &Architecture, train_rotation: RotationKind, probe: &ProbeConfig, seed: u64) -> Result<Classifier> {
    if train.is_empty() {
        return Err(Error::Argument("probe needs training samples".into()));
    }
    let feats = dataset_features(encoder, train, arch, train_rotation, seed, STREAM_TRAIN_AUG)?;
    let (features, labels): (Vec<Vec<f64>>, Vec<usize>) = feats
        .into_iter()
        .zip(train.labels())
        .filter(|((_, degenerate), _)| !(probe.exclude_degenerate && *degenerate))
        .map(|((f, _), l)| (f, l))
        .unzip();
    if features.is_empty() {
        return Err(Error::Argument("every training cloud has a degenerate frame".into()));
    }
    let (head, mean, scale) = train_head(&features, &labels, train.num_classes().max(2), probe, seed)?;
    Ok(Classifier { encoder: encoder.clone(), head, mean, scale, arch: arch.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub samples: usize,
    pub accuracy: f64,
    /// Accuracy over the samples without degenerate frames.
    pub regular_accuracy: f64,
    pub degenerate_samples: usize,
    /// Fraction of non-degenerate samples whose argmax under the test
    /// rotation equals the unrotated argmax.
    pub argmax_agreement: f64,
    /// Largest logit change under the test rotation, non-degenerate only.
    pub max_logit_residual: f64,
    pub predictions: Vec<usize>,
}

/// Scores `classifier` on `test` with a fresh rotation per sample drawn
/// from the scenario's test distribution.
pub fn evaluate_scenario(classifier: &Classifier, test: &Dataset, scenario: Scenario, seed: u64) -> Result<ScenarioReport> {
    if test.is_empty() {
        return Err(Error::Argument("evaluation needs test samples".into()));
    }
    let kind = scenario.test_rotation();
    let rows: Vec<(Vec<f64>, Vec<f64>, bool)> = test
        .clouds
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let r = sample_rotation(seed, STREAM_TEST_ROT, i, kind);
            let (rotated, deg_r) = classifier.predict(&c.rotated(&r))?;
            let (plain, deg_p) = classifier.predict(c)?;
            Ok((rotated, plain, deg_r || deg_p))
        })
        .collect::<Result<_>>()?;
    let labels = test.labels();
    let predictions: Vec<usize> = rows.iter().map(|(r, _, _)| argmax(r)).collect();
    let correct = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
    let regular: Vec<&(Vec<f64>, Vec<f64>, bool)> = rows.iter().filter(|r| !r.2).collect();
    let regular_correct = rows
        .iter()
        .zip(&labels)
        .filter(|((r, _, d), l)| !d && argmax(r) == **l)
        .count();
    let agree = regular.iter().filter(|(r, p, _)| argmax(r) == argmax(p)).count();
    let max_logit_residual = regular
        .iter()
        .flat_map(|(r, p, _)| r.iter().zip(p).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    Ok(ScenarioReport {
        scenario: scenario.name().to_string(),
        samples: test.len(),
        accuracy: correct as f64 / test.len() as f64,
        regular_accuracy: if regular.is_empty() { f64::NAN } else { regular_correct as f64 / regular.len() as f64 },
        degenerate_samples: rows.len() - regular.len(),
        argmax_agreement: if regular.is_empty() { 1.0 } else { agree as f64 / regular.len() as f64 },
        max_logit_residual,
        predictions,
    })
}

/// Probe trained under the scenario's train rotations, scored under its
/// test rotations.
pub fn run_scenario(encoder: &ParamStore, train: &Dataset, test: &Dataset, arch: &Architecture, scenario: Scenario, probe: &ProbeConfig, seed: u64) -> Result<ScenarioReport> {
    let clf = linear_probe(encoder, train, arch, scenario.train_rotation(), probe, seed)?;
    evaluate_scenario(&clf, test, scenario, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FewShotReport {
    pub k_way: usize,
    pub n_shot: usize,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// Queries per class in every few-shot episode.
pub const FEW_SHOT_QUERIES: usize = 20;

/// `k_way`-way `n_shot`-shot episodes: a probe on the support set, scored on
/// 20 unseen queries per class. Support samples use the scenario's train
/// rotations, queries its test rotations.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_eval(encoder: &ParamStore, data: &Dataset, arch: &Architecture, scenario: Scenario, k_way: usize, n_shot: usize, runs: usize, probe: &ProbeConfig, seed: u64) -> Result<FewShotReport> {
    if runs == 0 || k_way < 2 || n_shot == 0 {
        return Err(Error::Argument("few-shot needs runs ≥ 1, k_way ≥ 2 and n_shot ≥ 1".into()));
    }
    let labels = data.labels();
    let classes = data.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let eligible: Vec<usize> = (0..classes)
        .filter(|&c| by_class[c].len() >= n_shot + FEW_SHOT_QUERIES)
        .collect();
    if eligible.len() < k_way {
        return Err(Error::Argument(format!(
            "{k_way}-way {n_shot}-shot needs {k_way} classes with {} samples, found {}",
            n_shot + FEW_SHOT_QUERIES,
            eligible.len()
        )));
    }
    let support = dataset_features(encoder, data, arch, scenario.train_rotation(), seed, STREAM_TRAIN_AUG)?;
    let query = dataset_features(encoder, data, arch, scenario.test_rotation(), seed, STREAM_TEST_ROT)?;
    let mut accuracies = Vec::with_capacity(runs);
    for run in 0..runs {
        let mut rng = derive_rng(seed, &[STREAM_EPISODE, run as u64]);
        let mut chosen = eligible.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(k_way);
        let (mut sx, mut sy, mut qx, mut qy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (new_label, &c) in chosen.iter().enumerate() {
            let mut members = by_class[c].clone();
            members.shuffle(&mut rng);
            for &i in &members[..n_shot] {
                sx.push(support[i].0.clone());
                sy.push(new_label);
            }
            for &i in &members[n_shot..n_shot + FEW_SHOT_QUERIES] {
                qx.push(query[i].0.clone());
                qy.push(new_label);
            }
        }
        let (head, mean, scale) = train_head(&sx, &sy, k_way, probe, seed ^ run as u64)?;
        let clf = Classifier { encoder: ParamStore::new(), head, mean, scale, arch: arch.clone() };
        let correct = qx
            .iter()
            .zip(&qy)
            .map(|(f, &y)| clf.logits_from_features(f).map(|l| usize::from(argmax(&l) == y)))
            .sum::<Result<usize>>()?;
        accuracies.push(correct as f64 / qy.len() as f64);
    }
    let mean = accuracies.iter().sum::<f64>() / runs as f64;
    let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / runs as f64).sqrt();
    Ok(FewShotReport { k_way, n_shot, runs, mean, std, accuracies })
}

/// End-to-end training of encoder and head with cross-entropy under the
/// train-scenario rotations, for `steps` optimizer steps.
pub fn finetune(encoder: &ParamStore, train: &Dataset, cfg: &Config, steps: u64) -> Result<Classifier> {
    if train.is_empty() {
        return Err(Error::Argument("fine-tuning needs training samples".into()));
    }
    let arch = cfg.architecture();
    let labels = train.labels();
    let head = init_head(2 * arch.dim, train.num_classes().max(2), &mut derive_rng(cfg.seed, &[STREAM_HEAD]));
    let mut params = merged(&[("student", encoder), ("head", &head)]);
    let mut opt = OptimState::new(&params, schedule_for(cfg, train.len(), Some(steps)), adamw_config(cfg));
    for step in 0..steps {
        let batch = batch_indices(cfg, train.len(), step);
        let student = params.strip_prefix("student");
        let head = params.strip_prefix("head");
        let (loss, _, g) = reduce_batch(&batch, &params, |slot, idx| {
            let mut rng = derive_rng(cfg.seed, &[STREAM_STEP, step, slot as u64, 9]);
            let geometry = rotated_geometry(&train.clouds[idx], cfg.scenario.train_rotation(), &mut rng, &arch)?;
            let tape = Tape::new();
            let sb = Binder::new(&tape, &student, true);
            let hb = Binder::new(&tape, &head, true);
            let pt = build_patch_tokens(&sb, &geometry, &arch)?;
            let z = encode_patches(&sb, &pt, &arch)?;
            let loss = tape.cross_entropy(classify_head(&hb, z)?, &[labels[idx]])?;
            let value = tape.item(loss)?;
            let grads = tape.backward(loss)?;
            Ok(SampleOut {
                loss: value,
                variance: 0.0,
                grads: merged(&[("student", &sb.gradients(&grads)), ("head", &hb.gradients(&grads))]),
            })
        })?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("fine-tune step {step}: loss is {loss}")));
        }
        adamw_step(&mut params, &g, &mut opt)?;
    }
    let d = 2 * arch.dim;
    Ok(Classifier {
        encoder: params.strip_prefix("student"),
        head: params.strip_prefix("head"),
        mean: vec![0.0; d],
        scale: vec![1.0; d],
        arch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut cfg = Config::default();
        cfg.optim.batch = 4;
        let mut seen: Vec<usize> = (0..3).flat_map(|s| batch_indices(&cfg, 10, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn schedule_budget() {
        let mut cfg = Config::default();
        cfg.optim.batch = 16;
        cfg.optim.epochs = 30;
        cfg.optim.warmup_epochs = 3;
        let s = schedule_for(&cfg, 200, None);
        assert_eq!((s.total, s.warmup), (390, 39));
        let s = schedule_for(&cfg, 200, Some(100));
        assert_eq!((s.total, s.warmup), (100, 10));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut head = init_head(4, 3, &mut derive_rng(0, &[0]));
        head.zero_values();
        let logits = head_logits(&head, &[vec![1.0, -2.0, 3.0, 0.5]]).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_ignores_patch_order() {
        let z = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, -1.0], vec![2.0, 0.0]]).unwrap();
        let zp = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 5.0], vec![3.0, -1.0]]).unwrap();
        assert_eq!(pool_values(&z), pool_values(&zp));
        assert_eq!(pool_values(&z), vec![2.0, 4.0 / 3.0, 3.0, 5.0]);
        let tape = Tape::new();
        let pooled = pool_latents(&tape, tape.constant(z).unwrap()).unwrap();
        assert_eq!(tape.value(pooled).unwrap().data(), &[2.0, 4.0 / 3.0, 3.0, 5.0]);
    }

    #[test]
    fn separable_probe_is_perfect() {
        let features: Vec<Vec<f64>> = (0..20).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, (i as f64) * 0.01]).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let (head, mean, scale) = train_head(&features, &labels, 2, &ProbeConfig::default(), 1).unwrap();
        let clf = Classifier { encoder: ParamStore::new(), head, mean, scale, arch: Config::default().architecture() };
        for (f, &y) in features.iter().zip(&labels) {
            assert_eq!(argmax(&clf.logits_from_features(f).unwrap()), y);
        }
    }
}
