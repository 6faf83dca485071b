//! Transformer encoder whose self-attention carries an additive bias built
//! from relative patch orientations.
//!
//! For patches `i, j` with orientations `R_i, R_j`, the relative rotation
//! `R_ij = R_j·R_iᵀ` is unchanged when the whole cloud rotates. Its
//! embedding `r_ij = MLP(vec(R_ij))` enters attention through the bilinear
//! bias `b_ij = (t̄_i·W^Q)·r_ijᵀ`, which reuses the query projection of the
//! first block. With `H` heads the query and `r_ij` are both split into `H`
//! slices of width `d_k = D/H` and each head gets its own bias; at `H = 1`
//! this is the single-head form. The bias is computed once per forward and
//! shared by all blocks.

use crate::config::Architecture;
use crate::embed::{embed_orientations, pair_rotation_features, PatchTokens};
use crate::error::{Error, Result};
use crate::nn::{layernorm, linear};
use crate::params::{Binder, Initializer, ParamStore};
use crate::rotation::RotationMatrix;
use crate::tensor::Var;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub pe_every_layer: bool,
}

impl EncoderConfig {
    pub fn encoder(arch: &Architecture) -> Self {
        EncoderConfig {
            depth: arch.depth,
            dim: arch.dim,
            heads: arch.heads,
            mlp_hidden: arch.mlp_hidden,
            dropout: arch.dropout,
            pe_every_layer: arch.pe_every_layer,
        }
    }

    pub fn predictor(arch: &Architecture) -> Self {
        EncoderConfig {
            depth: arch.predictor_depth,
            ..Self::encoder(arch)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Per-head additive attention bias, `H` matrices of `n × n`.
#[derive(Debug, Clone)]
pub struct AttentionBias {
    pub heads: Vec<Var>,
}

pub fn init_blocks(init: &mut Initializer<'_>, store: &mut ParamStore, cfg: &EncoderConfig) {
    let d = cfg.dim;
    for l in 0..cfg.depth {
        let p = format!("blocks.{l}");
        init.layernorm(store, &format!("{p}.norm1"), d);
        init.linear(store, &format!("{p}.attn.wq"), d, d, false);
        init.linear(store, &format!("{p}.attn.wk"), d, d, false);
        init.linear(store, &format!("{p}.attn.wv"), d, d, false);
        init.linear(store, &format!("{p}.attn.proj"), d, d, true);
        init.layernorm(store, &format!("{p}.norm2"), d);
        init.linear(store, &format!("{p}.mlp.fc1"), d, cfg.mlp_hidden, true);
        init.linear(store, &format!("{p}.mlp.fc2"), cfg.mlp_hidden, d, true);
    }
    init.layernorm(store, "norm", d);
}

/// Relative-orientation bias for the tokens in `tokens` (`n × D`).
///
/// `wq` names the query weight used as the bilinear operator; orientation
/// embeddings come from the `orient` MLP. Pairs that involve a fallback
/// patch use the identity rotation.
pub fn compute_ri_oe_bias(
    b: &Binder<'_>,
    tokens: Var,
    rotations: &[RotationMatrix],
    fallback: &[bool],
    wq: &str,
    heads: usize,
) -> Result<AttentionBias> {
    let t = b.tape();
    let n = rotations.len();
    let shape = t.shape(tokens)?;
    if shape.len() != 2 || shape[0] != n || fallback.len() != n {
        return Err(Error::Shape(format!(
            "bias for {n} rotations with tokens {shape:?}"
        )));
    }
    let dim = shape[1];
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Shape(format!("{dim} not divisible into {heads} heads")));
    }
    let dk = dim / heads;
    let q = t.matmul(tokens, b.param(wq)?)?;
    let r = embed_orientations(b, "orient", pair_rotation_features(rotations, fallback)?)?;
    let rows: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let q_rep = t.gather_rows(q, &rows)?;
    let prod = t.mul(q_rep, r)?;
    let heads = (0..heads)
        .map(|h| {
            let s = t.sum_lastdim(t.slice_cols(prod, h * dk, dk)?)?;
            t.reshape(s, &[n, n])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionBias { heads })
}

/// Multi-head self-attention `softmax((QKᵀ + B)/√d_k)·V` followed by the
/// output projection. `prefix` names the block's `attn` parameters.
pub fn biased_attention(
    b: &Binder<'_>,
    prefix: &str,
    x: Var,
    bias: Option<&AttentionBias>,
    heads: usize,
) -> Result<Var> {
    let t = b.tape();
    let shape = t.shape(x)?;
    let (n, dim) = (shape[0], shape[1]);
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Shape(format!("{dim} not divisible into {heads} heads")));
    }
    if let Some(bias) = bias {
        if bias.heads.len() != heads {
            return Err(Error::Shape(format!(
                "bias has {} heads, attention has {heads}",
                bias.heads.len()
            )));
        }
        for &bh in &bias.heads {
            if t.shape(bh)? != [n, n] {
                return Err(Error::Shape(format!("bias head must be {n}x{n}")));
            }
        }
    }
    let dk = dim / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = t.matmul(x, b.param(&format!("{prefix}.wq.w"))?)?;
    let k = t.matmul(x, b.param(&format!("{prefix}.wk.w"))?)?;
    let v = t.matmul(x, b.param(&format!("{prefix}.wv.w"))?)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * dk, dk)?;
        let kh = t.slice_cols(k, h * dk, dk)?;
        let vh = t.slice_cols(v, h * dk, dk)?;
        let mut scores = t.matmul(qh, t.transpose(kh)?)?;
        if let Some(bias) = bias {
            scores = t.add(scores, bias.heads[h])?;
        }
        let attn = t.softmax(t.scale(scores, scale)?)?;
        outs.push(t.matmul(attn, vh)?);
    }
    let merged = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs)? };
    linear(b, &format!("{prefix}.proj"), merged)
}

fn block(b: &Binder<'_>, l: usize, x: Var, bias: Option<&AttentionBias>, cfg: &EncoderConfig) -> Result<Var> {
    let t = b.tape();
    let p = format!("blocks.{l}");
    let h = layernorm(b, &format!("{p}.norm1"), x)?;
    let a = biased_attention(b, &format!("{p}.attn"), h, bias, cfg.heads)?;
    let x = t.add(x, b.dropout(a, cfg.dropout)?)?;
    let h = layernorm(b, &format!("{p}.norm2"), x)?;
    let h = t.gelu(linear(b, &format!("{p}.mlp.fc1"), h)?)?;
    let h = linear(b, &format!("{p}.mlp.fc2"), h)?;
    t.add(x, b.dropout(h, cfg.dropout)?)
}

/// Pre-norm transformer stack over `tokens` with position embeddings
/// `ripos` (added at the input, and again before every later block when
/// `pe_every_layer`), ending in a layer norm.
pub fn encode(
    b: &Binder<'_>,
    tokens: Var,
    ripos: Option<Var>,
    bias: Option<&AttentionBias>,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let t = b.tape();
    let mut x = match ripos {
        Some(p) => t.add(tokens, p)?,
        None => tokens,
    };
    for l in 0..cfg.depth {
        if l > 0 && cfg.pe_every_layer {
            if let Some(p) = ripos {
                x = t.add(x, p)?;
            }
        }
        x = block(b, l, x, bias, cfg).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("block {l}: {msg}")),
            other => other,
        })?;
    }
    layernorm(b, "norm", x)
}

/// Bias (when enabled) plus encoder stack over explicit inputs.
pub fn ri_transformer(
    b: &Binder<'_>,
    input: Var,
    ripos: Option<Var>,
    rotations: &[RotationMatrix],
    fallback: &[bool],
    cfg: &EncoderConfig,
    ri_oe: bool,
) -> Result<Var> {
    let bias = if ri_oe && cfg.depth > 0 {
        Some(compute_ri_oe_bias(b, input, rotations, fallback, "blocks.0.attn.wq.w", cfg.heads)?)
    } else {
        None
    };
    encode(b, input, ripos, bias.as_ref(), cfg)
}

/// Encodes embedded patches with the encoder parameters in `b`.
pub fn encode_patches(b: &Binder<'_>, pt: &PatchTokens, arch: &Architecture) -> Result<Var> {
    ri_transformer(
        b,
        pt.tokens,
        pt.ripos,
        &pt.rotations,
        &pt.fallback,
        &EncoderConfig::encoder(arch),
        arch.ri_oe,
    )
}
