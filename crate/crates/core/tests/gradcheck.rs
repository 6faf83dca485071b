//! Central finite-difference checks of every tape op, every layer and the
//! end-to-end pretraining losses.

mod common;

use common::gradients::layer_suite;
use common::*;
use std::time::Instant;

const OP_TOL: f64 = 1e-5;
const LAYER_TOL: f64 = 1e-4;

#[test]
fn matmul_and_elementwise() {
    let a = random_tensor(&[3, 4], 1);
    let b = random_tensor(&[4, 2], 2);
    assert!(check_inputs(&[a.clone(), b], |t, v| probe_sum(t, t.matmul(v[0], v[1])?, 3)) < 1e-6);
    let c = random_tensor(&[3, 4], 4);
    for op in 0..4 {
        let e = check_inputs(&[a.clone(), c.clone()], |t, v| {
            let y = match op {
                0 => t.add(v[0], v[1])?,
                1 => t.sub(v[0], v[1])?,
                2 => t.mul(v[0], v[1])?,
                _ => t.scale(v[0], -1.7)?,
            };
            probe_sum(t, y, 5)
        });
        assert!(e < OP_TOL, "op {op}: {e}");
    }
}

#[test]
fn broadcast_and_activations() {
    let x = random_tensor(&[3, 5], 6);
    let row = random_tensor(&[5], 7);
    assert!(check_inputs(&[x.clone(), row], |t, v| probe_sum(t, t.add_row(v[0], v[1])?, 8)) < OP_TOL);
    assert!(check_inputs(std::slice::from_ref(&x), |t, v| probe_sum(t, t.gelu(v[0])?, 9)) < OP_TOL);
    assert!(check_inputs(std::slice::from_ref(&x), |t, v| probe_sum(t, t.softmax(v[0])?, 10)) < OP_TOL);
    let gamma = random_tensor(&[5], 11);
    let beta = random_tensor(&[5], 12);
    let e = check_inputs(&[x, gamma, beta], |t, v| probe_sum(t, t.layernorm(v[0], v[1], v[2], 1e-6)?, 13));
    assert!(e < OP_TOL, "layernorm {e}");
}

#[test]
fn structural_ops() {
    let x = random_tensor(&[4, 3], 14);
    let y = random_tensor(&[2, 3], 15);
    let z = random_tensor(&[4, 2], 16);
    assert!(check_inputs(std::slice::from_ref(&x), |t, v| probe_sum(t, t.transpose(v[0])?, 17)) < OP_TOL);
    assert!(check_inputs(std::slice::from_ref(&x), |t, v| probe_sum(t, t.reshape(v[0], &[2, 6])?, 18)) < OP_TOL);
    assert!(check_inputs(&[x.clone(), y], |t, v| probe_sum(t, t.concat_rows(&[v[0], v[1]])?, 19)) < OP_TOL);
    assert!(check_inputs(&[x.clone(), z], |t, v| probe_sum(t, t.concat_cols(&[v[0], v[1]])?, 20)) < OP_TOL);
    assert!(check_inputs(std::slice::from_ref(&x), |t, v| probe_sum(t, t.slice_cols(v[0], 1, 2)?, 21)) < OP_TOL);
    assert!(check_inputs(std::slice::from_ref(&x), |t, v| probe_sum(t, t.gather_rows(v[0], &[3, 0, 3, 1])?, 22)) < OP_TOL);
}

#[test]
fn reductions_and_losses() {
    let x = random_tensor(&[6, 3], 23);
    let y = random_tensor(&[6, 3], 24);
    assert!(check_inputs(std::slice::from_ref(&x), |t, v| t.sum(v[0])) < OP_TOL);
    assert!(check_inputs(std::slice::from_ref(&x), |t, v| t.mean(v[0])) < OP_TOL);
    assert!(check_inputs(std::slice::from_ref(&x), |t, v| probe_sum(t, t.sum_lastdim(v[0])?, 25)) < OP_TOL);
    assert!(check_inputs(std::slice::from_ref(&x), |t, v| probe_sum(t, t.mean_rows(v[0])?, 26)) < OP_TOL);
    assert!(check_inputs(std::slice::from_ref(&x), |t, v| probe_sum(t, t.max_pool_rows(v[0], 3)?, 27)) < OP_TOL);
    assert!(check_inputs(&[x.clone(), y.clone()], |t, v| t.mse(v[0], v[1])) < 1e-6);
    assert!(check_inputs(&[x.clone(), y], |t, v| t.chamfer(v[0], v[1], 3)) < OP_TOL);
    assert!(check_inputs(&[x], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 1, 0, 2])) < OP_TOL);
}

#[test]
fn every_layer_and_both_losses() {
    let started = Instant::now();
    for (name, e) in layer_suite() {
        assert!(e < LAYER_TOL, "{name}: {e}");
    }
    assert!(started.elapsed().as_secs() < 120);
}

#[test]
fn linear_layer_under_mse_is_tight() {
    let e = common::gradients::mse_over_linear_layer();
    assert!(e < OP_TOL, "{e}");
}
