//! Finite-difference checks of every layer and of both pretraining losses,
//! shared by the gradient tests and the acceptance suite.

use super::*;
use rimae::config::Config;
use rimae::embed::{analyze_cloud, build_patch_tokens, init_embedders, tokenize_content, PatchGeometry};
use rimae::mae::{ae_baseline_step, init_encoder, init_predictor, latent_loss, make_mask, student_forward, teacher_forward, MaskPlan};
use rimae::nn::{layernorm, linear, mlp};
use rimae::params::{Binder, Initializer, ParamStore};
use rimae::seed::derive_rng;
use rimae::train::{classify_head, init_head};
use rimae::transformer::{biased_attention, compute_ri_oe_bias, encode, encode_patches, init_blocks, EncoderConfig};

pub fn mse_over_linear_layer() -> f64 {
    let mut store = ParamStore::new();
    let mut rng = derive_rng(1, &[]);
    Initializer::new(&mut rng).linear(&mut store, "fc", 4, 3, true);
    let x = random_tensor(&[5, 4], 30);
    let target = random_tensor(&[5, 3], 31);
    let e = check_params(&store, 100, |b| {
        let t = b.tape();
        let y = linear(b, "fc", t.constant(x.clone())?)?;
        t.mse(y, t.constant(target.clone())?)
    });
    e
}

pub fn mlp_and_layernorm_layers() -> f64 {
    let mut store = ParamStore::new();
    let mut rng = derive_rng(2, &[]);
    let mut init = Initializer::new(&mut rng);
    init.linear(&mut store, "m.fc1", 4, 6, true);
    init.linear(&mut store, "m.fc2", 6, 4, true);
    init.normal(&mut store, "ln.gamma", &[4], 1.0);
    init.normal(&mut store, "ln.beta", &[4], 1.0);
    let x = random_tensor(&[3, 4], 32);
    let e = check_params(&store, 100, |b| {
        let h = mlp(b, "m", b.tape().constant(x.clone())?)?;
        probe_sum(b.tape(), layernorm(b, "ln", h)?, 33)
    });
    e
}

fn small_arch() -> rimae::config::Architecture {
    desk_config().architecture()
}

pub fn tokenizer() -> f64 {
    let arch = small_arch();
    let mut store = ParamStore::new();
    let mut rng = derive_rng(3, &[]);
    init_embedders(&mut Initializer::new(&mut rng), &mut store, &arch, true);
    let cloud = &dataset(1, 0).clouds[0];
    let g = analyze_cloud(cloud, 4, 8).unwrap();
    let sets: Vec<&[[f64; 3]]> = g.frames.iter().map(|f| f.canonical.as_slice()).collect();
    let e = check_params(&store, 12, |b| probe_sum(b.tape(), tokenize_content(b, &sets)?, 34));
    e
}

pub fn attention_with_orientation_bias() -> f64 {
    let arch = small_arch();
    let cfg = EncoderConfig::encoder(&arch);
    let mut store = ParamStore::new();
    let mut rng = derive_rng(4, &[]);
    let mut init = Initializer::new(&mut rng);
    init_embedders(&mut init, &mut store, &arch, false);
    init_blocks(&mut init, &mut store, &cfg);
    let cloud = &dataset(2, 1).clouds[1];
    let g = analyze_cloud(cloud, 6, 12).unwrap();
    let rotations = g.rotations();
    let fallback = vec![false; rotations.len()];
    let x = random_tensor(&[6, arch.dim], 35);
    let e = check_params(&store, 6, |b| {
        let t = b.tape();
        let xv = t.constant(x.clone())?;
        let bias = compute_ri_oe_bias(b, xv, &rotations, &fallback, "blocks.0.attn.wq.w", cfg.heads)?;
        probe_sum(t, biased_attention(b, "blocks.1.attn", xv, Some(&bias), cfg.heads)?, 36)
    });
    // Gradient with respect to the attention input as well.
    let tape_store = store.clone();
    let e_input = check_inputs(&[x], |t, v| {
        let b = Binder::new(t, &tape_store, false);
        let bias = compute_ri_oe_bias(&b, v[0], &rotations, &fallback, "blocks.0.attn.wq.w", cfg.heads)?;
        probe_sum(t, biased_attention(&b, "blocks.0.attn", v[0], Some(&bias), cfg.heads)?, 37)
    });
    e.max(e_input)
}

pub fn encoder_stack() -> f64 {
    let arch = small_arch();
    let cfg = EncoderConfig::encoder(&arch);
    let mut store = ParamStore::new();
    let mut rng = derive_rng(5, &[]);
    init_blocks(&mut Initializer::new(&mut rng), &mut store, &cfg);
    let tokens = random_tensor(&[5, arch.dim], 38);
    let pos = random_tensor(&[5, arch.dim], 39);
    let e = check_params(&store, 5, |b| {
        let t = b.tape();
        let y = encode(b, t.constant(tokens.clone())?, Some(t.constant(pos.clone())?), None, &cfg)?;
        probe_sum(t, y, 40)
    });
    e
}

fn e2e_setup(seed: u64) -> (Config, PatchGeometry, MaskPlan) {
    let cfg = desk_config();
    let arch = cfg.architecture();
    let data = asymmetric_dataset(3, seed);
    let g = analyze_cloud(&data.clouds[seed as usize % 3], arch.g, arch.k).unwrap();
    let plan = make_mask(arch.g, cfg.mae.alpha, &mut derive_rng(seed, &[1])).unwrap();
    (cfg, g, plan)
}

pub fn full_encoder_with_embeddings() -> f64 {
    let (cfg, geometry, _) = e2e_setup(1);
    let arch = cfg.architecture();
    let params = init_encoder(&arch, &mut derive_rng(7, &[]));
    let e = check_params(&params, 3, |b| {
        let pt = build_patch_tokens(b, &geometry, &arch)?;
        probe_sum(b.tape(), encode_patches(b, &pt, &arch)?, 41)
    });
    e
}

pub fn end_to_end_latent_loss() -> f64 {
    let (cfg, geometry, plan) = e2e_setup(0);
    let arch = cfg.architecture();
    let mut rng = derive_rng(6, &[]);
    let student = init_encoder(&arch, &mut rng);
    let predictor = init_predictor(&arch, arch.dim, cfg.mae.mask_token_init, &mut rng);
    let teacher = init_encoder(&arch, &mut rng);
    let targets = teacher_forward(&teacher, &geometry, &plan, &arch, &cfg.mae).unwrap();
    let e = check_stores(&[&student, &predictor], 3, |bs| {
        let pred = student_forward(&bs[0], &bs[1], &geometry, &plan, &arch, &cfg.mae)?;
        let t = bs[0].tape();
        latent_loss(t, pred, t.constant(targets.clone())?)
    });
    e
}

pub fn end_to_end_autoencoder_loss() -> f64 {
    let (cfg, geometry, plan) = e2e_setup(2);
    let arch = cfg.architecture();
    let mut rng = derive_rng(8, &[]);
    let student = init_encoder(&arch, &mut rng);
    let decoder = init_predictor(&arch, arch.k * 3, cfg.mae.mask_token_init, &mut rng);
    
    check_stores(&[&student, &decoder], 3, |bs| {
        ae_baseline_step(&bs[0], &bs[1], &geometry, &plan, &arch)
    })
}

pub fn classification_head() -> f64 {
    let mut rng = derive_rng(10, &[]);
    let head = init_head(16, 3, &mut rng);
    let z = random_tensor(&[5, 8], 42);
    let e = check_params(&head, 50, |b| {
        let t = b.tape();
        let logits = classify_head(b, t.constant(z.clone())?)?;
        t.cross_entropy(logits, &[2])
    });
    e
}

/// Every check with its name, in dependency order.
pub fn layer_suite() -> Vec<(&'static str, f64)> {
    vec![
        ("linear", mse_over_linear_layer()),
        ("mlp+layernorm", mlp_and_layernorm_layers()),
        ("tokenizer", tokenizer()),
        ("attention+orientation bias", attention_with_orientation_bias()),
        ("encoder blocks", encoder_stack()),
        ("encoder with embeddings", full_encoder_with_embeddings()),
        ("classification head", classification_head()),
        ("latent loss end to end", end_to_end_latent_loss()),
        ("autoencoder loss end to end", end_to_end_autoencoder_loss()),
    ]
}
