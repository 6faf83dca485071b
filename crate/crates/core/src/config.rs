//! Run configuration.
//!
//! JSON with one object per section. Missing keys take defaults, unknown
//! keys are rejected, and every value is range-checked on load.
//!
//! ```json
//! {
//!   "model": {"dim": 96, "depth": 4, "heads": 2, "mlp_ratio": 4.0, "g": 16, "k": 16,
//!             "predictor_depth": 1, "dropout": 0.0, "pe_every_layer": true},
//!   "mae": {"alpha": 0.6, "ema_m0": 0.996, "ema_schedule": "cosine",
//!           "mask_token_init": 0.02, "target_layernorm": false, "masked_orientation": true},
//!   "optim": {"base_lr": 0.0005, "weight_decay": 0.05, "warmup_epochs": 10, "epochs": 300,
//!             "batch": 16, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "seg_lr": 0.0002},
//!   "scenario": "zso3",
//!   "seed": 0,
//!   "ablation": {"ri_oe": true, "ri_pe": true, "dual_branch": true,
//!                "ori_embedding": false, "raw_baseline": false}
//! }
//! ```

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{random_rotation, random_z_rotation, RotationMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Patches per cloud.
    pub g: usize,
    /// Points per patch.
    pub k: usize,
    pub predictor_depth: usize,
    pub dropout: f64,
    /// Re-add position embeddings at every block input, not only the first.
    pub pe_every_layer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 96,
            depth: 4,
            heads: 2,
            mlp_ratio: 4.0,
            g: 16,
            k: 16,
            predictor_depth: 1,
            dropout: 0.0,
            pe_every_layer: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmaSchedule {
    /// Cosine ramp from `ema_m0` to 1 over training.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub alpha: f64,
    pub ema_m0: f64,
    pub ema_schedule: EmaSchedule,
    /// Standard deviation of the mask token's normal initialization.
    pub mask_token_init: f64,
    /// Layer-normalize teacher targets (no affine) before the loss.
    pub target_layernorm: bool,
    /// Give mask tokens the orientations of their patches in the predictor's
    /// attention bias. When false only their position embedding is known.
    pub masked_orientation: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            alpha: 0.6,
            ema_m0: 0.996,
            ema_schedule: EmaSchedule::Cosine,
            mask_token_init: 0.02,
            target_layernorm: false,
            masked_orientation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Kept for schema completeness; segmentation heads are not built.
    pub seg_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 0.0005,
            weight_decay: 0.05,
            warmup_epochs: 10,
            epochs: 300,
            batch: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seg_lr: 0.0002,
        }
    }
}

/// Rotations applied to inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationKind {
    None,
    Z,
    So3,
}

impl RotationKind {
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> RotationMatrix {
        match self {
            RotationKind::None => RotationMatrix::IDENTITY,
            RotationKind::Z => random_z_rotation(rng),
            RotationKind::So3 => random_rotation(rng),
        }
    }
}

/// Train/test rotation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "zz")]
    ZZ,
    #[serde(rename = "zso3")]
    ZSo3,
    #[serde(rename = "so3so3")]
    So3So3,
}

impl Scenario {
    pub fn train_rotation(self) -> RotationKind {
        match self {
            Scenario::ZZ | Scenario::ZSo3 => RotationKind::Z,
            Scenario::So3So3 => RotationKind::So3,
        }
    }

    pub fn test_rotation(self) -> RotationKind {
        match self {
            Scenario::ZZ => RotationKind::Z,
            Scenario::ZSo3 | Scenario::So3So3 => RotationKind::So3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ZZ => "z/z",
            Scenario::ZSo3 => "z/SO3",
            Scenario::So3So3 => "SO3/SO3",
        }
    }

    pub fn all() -> [Scenario; 3] {
        [Scenario::ZZ, Scenario::So3So3, Scenario::ZSo3]
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zz" | "z/z" => Ok(Scenario::ZZ),
            "zso3" | "z/so3" => Ok(Scenario::ZSo3),
            "so3so3" | "so3/so3" => Ok(Scenario::So3So3),
            other => Err(Error::Argument(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Relative-orientation attention bias.
    pub ri_oe: bool,
    /// Position embedding of the origin in each patch frame. When false and
    /// `raw_baseline` is off, no position embedding is used.
    pub ri_pe: bool,
    /// Latent-space student/teacher objective; false selects the
    /// coordinate-reconstruction autoencoder.
    pub dual_branch: bool,
    /// Add the per-patch orientation embedding `MLP(R_i)` to the tokens.
    /// Not rotation invariant.
    pub ori_embedding: bool,
    /// Conventional baseline: tokens from uncanonicalized patches, position
    /// embedding of raw centers, no orientation bias.
    pub raw_baseline: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            ri_oe: true,
            ri_pe: true,
            dual_branch: true,
            ori_embedding: false,
            raw_baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub mae: MaeConfig,
    pub optim: OptimConfig,
    pub scenario: Scenario,
    pub seed: u64,
    pub ablation: AblationFlags,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::default(),
            mae: MaeConfig::default(),
            optim: OptimConfig::default(),
            scenario: Scenario::ZSo3,
            seed: 0,
            ablation: AblationFlags::default(),
        }
    }
}

/// How patch points are presented to the tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenFrame {
    /// PCA-aligned canonical pose.
    Canonical,
    /// Input-frame coordinates relative to the patch center.
    Raw,
}

/// Which point feeds the position embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    /// `c_i · R_iᵀ`, the origin seen from the patch frame.
    RotationInvariant,
    /// `c_i` itself.
    RawCenter,
    Off,
}

/// Resolved architecture used by the forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub g: usize,
    pub k: usize,
    pub predictor_depth: usize,
    pub dropout: f64,
    pub pe_every_layer: bool,
    pub ri_oe: bool,
    pub tokens: TokenFrame,
    pub position: PositionMode,
    pub ori_embedding: bool,
}

/// Hidden widths of the per-point tokenizer MLP.
pub const TOKENIZER_HIDDEN: [usize; 2] = [64, 128];
/// Hidden width of the classification head.
pub const HEAD_HIDDEN: usize = 256;

impl Config {
    /// Full-size settings: 12 blocks of width 384 with 6 heads, 64 patches
    /// of 32 points.
    pub fn full_scale() -> Self {
        let mut c = Config::default();
        c.model.dim = 384;
        c.model.depth = 12;
        c.model.heads = 6;
        c.model.g = 64;
        c.model.k = 32;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.dim == 0 || m.heads == 0 || !m.dim.is_multiple_of(m.heads) {
            return bad(format!("model.dim {} must be a positive multiple of model.heads {}", m.dim, m.heads));
        }
        if m.g == 0 {
            return bad("model.g must be positive".into());
        }
        if m.k < 3 {
            return bad(format!("model.k must be at least 3, got {}", m.k));
        }
        if !(m.mlp_ratio > 0.0 && m.mlp_ratio.is_finite()) {
            return bad(format!("model.mlp_ratio must be positive, got {}", m.mlp_ratio));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("model.dropout must lie in [0, 1), got {}", m.dropout));
        }
        if m.predictor_depth == 0 {
            return bad("model.predictor_depth must be at least 1".into());
        }
        let a = &self.mae;
        if !(a.alpha > 0.0 && a.alpha < 1.0) {
            return bad(format!("mae.alpha must lie in (0, 1), got {}", a.alpha));
        }
        let masked = (a.alpha * m.g as f64).floor() as usize;
        if masked == 0 || masked >= m.g {
            return bad(format!("mae.alpha {} masks {masked} of {} patches", a.alpha, m.g));
        }
        if !(0.0..=1.0).contains(&a.ema_m0) {
            return bad(format!("mae.ema_m0 must lie in [0, 1], got {}", a.ema_m0));
        }
        if !(a.mask_token_init >= 0.0 && a.mask_token_init.is_finite()) {
            return bad("mae.mask_token_init must be non-negative".into());
        }
        let o = &self.optim;
        if !(o.base_lr > 0.0 && o.base_lr.is_finite()) {
            return bad(format!("optim.base_lr must be positive, got {}", o.base_lr));
        }
        if !(o.weight_decay >= 0.0) {
            return bad("optim.weight_decay must be non-negative".into());
        }
        if o.epochs == 0 || o.batch == 0 {
            return bad("optim.epochs and optim.batch must be positive".into());
        }
        if o.warmup_epochs > o.epochs {
            return bad("optim.warmup_epochs exceeds optim.epochs".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optim betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        let m = &self.model;
        let f = &self.ablation;
        let (tokens, position, ri_oe) = if f.raw_baseline {
            (TokenFrame::Raw, PositionMode::RawCenter, false)
        } else if f.ri_pe {
            (TokenFrame::Canonical, PositionMode::RotationInvariant, f.ri_oe)
        } else {
            (TokenFrame::Canonical, PositionMode::Off, f.ri_oe)
        };
        Architecture {
            dim: m.dim,
            depth: m.depth,
            heads: m.heads,
            mlp_hidden: ((m.dim as f64) * m.mlp_ratio).round().max(1.0) as usize,
            g: m.g,
            k: m.k,
            predictor_depth: m.predictor_depth,
            dropout: m.dropout,
            pe_every_layer: m.pe_every_layer,
            ri_oe,
            tokens,
            position,
            ori_embedding: f.ori_embedding,
        }
    }

    pub fn masked_count(&self) -> usize {
        (self.mae.alpha * self.model.g as f64).floor() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        let again = Config::from_json(&c.to_json()).unwrap();
        assert_eq!(again, c);
        let p = Config::full_scale();
        p.validate().unwrap();
        assert_eq!(p.masked_count(), 38);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_json(r#"{"model": {"dimm": 8}}"#).is_err());
        assert!(Config::from_json(r#"{"colour": 1}"#).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = Config::from_json(r#"{"seed": 7, "model": {"dim": 32, "heads": 4}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.dim, 32);
        assert_eq!(c.model.depth, 4);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for json in [
            r#"{"model": {"dim": 10, "heads": 3}}"#,
            r#"{"mae": {"alpha": 1.0}}"#,
            r#"{"mae": {"alpha": 0.01}}"#,
            r#"{"optim": {"batch": 0}}"#,
            r#"{"model": {"k": 2}}"#,
            r#"{"scenario": "xy"}"#,
        ] {
            assert!(Config::from_json(json).is_err(), "{json}");
        }
    }

    #[test]
    fn scenarios_parse() {
        assert_eq!("zso3".parse::<Scenario>().unwrap(), Scenario::ZSo3);
        assert_eq!("SO3/SO3".parse::<Scenario>().unwrap(), Scenario::So3So3);
        assert!("x".parse::<Scenario>().is_err());
    }

    #[test]
    fn baseline_architecture_drops_invariant_parts() {
        let mut c = Config::default();
        c.ablation.raw_baseline = true;
        let a = c.architecture();
        assert_eq!(a.tokens, TokenFrame::Raw);
        assert_eq!(a.position, PositionMode::RawCenter);
        assert!(!a.ri_oe);
    }
}
