//! Worked values for the tape ops and the backward contract.

use approx::assert_abs_diff_eq;
use rimae::tensor::{Tape, Tensor};
use rimae::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_values() {
    let tape = Tape::new();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let b = tape.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0])).unwrap();
    assert_eq!(tape.value(tape.matmul(i, b).unwrap()).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
    let r = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let c = tape.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
    assert_eq!(tape.value(tape.matmul(r, c).unwrap()).unwrap().data(), &[11.0]);
    assert!(matches!(tape.matmul(r, r), Err(Error::Shape(_))));
}

#[test]
fn softmax_values() {
    let tape = Tape::new();
    let run = |d: &[f64]| {
        let x = tape.constant(t(&[1, d.len()], d)).unwrap();
        tape.value(tape.softmax(x).unwrap()).unwrap().data().to_vec()
    };
    assert_eq!(run(&[0.0, 0.0]), vec![0.5, 0.5]);
    let big = run(&[1000.0, 0.0]);
    assert_abs_diff_eq!(big[0], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(big[1], 0.0, epsilon = 1e-12);
    let v = run(&[1.0, 2.0, 3.0]);
    for (a, b) in v.iter().zip([0.09003, 0.24473, 0.66524]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-5);
    }
}

#[test]
fn nan_input_is_a_numeric_error() {
    let tape = Tape::new();
    assert!(matches!(tape.constant(t(&[1, 2], &[f64::NAN, 0.0])), Err(Error::Numeric(_))));
}

#[test]
fn layernorm_values() {
    let tape = Tape::new();
    let ones = tape.constant(t(&[2], &[1.0, 1.0])).unwrap();
    let zeros = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0])).unwrap();
    let y = tape.value(tape.layernorm(x, ones, zeros, 0.0).unwrap()).unwrap();
    assert_eq!(y.data(), &[-1.0, 1.0]);
    let flat = tape.constant(t(&[1, 2], &[4.0, 4.0])).unwrap();
    let y = tape.value(tape.layernorm(flat, ones, zeros, 1e-6).unwrap()).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0]);
}

#[test]
fn mse_and_gelu_values() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let z = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
    assert_eq!(tape.item(tape.mse(a, z).unwrap()).unwrap(), 1.0);
    assert_eq!(tape.item(tape.mse(a, a).unwrap()).unwrap(), 0.0);
    let zero = tape.constant(Tensor::zeros(&[1, 1])).unwrap();
    assert_eq!(tape.value(tape.gelu(zero).unwrap()).unwrap().data(), &[0.0]);
}

#[test]
fn gather_and_concat() {
    let tape = Tape::new();
    let x = tape.constant(t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
    let g = tape.value(tape.gather_rows(x, &[2, 0]).unwrap()).unwrap();
    assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
    assert!(tape.gather_rows(x, &[3]).is_err());
    let c = tape.value(tape.concat_rows(&[x, x]).unwrap()).unwrap();
    assert_eq!(c.shape(), &[6, 2]);
}

#[test]
fn sum_gradient_is_ones() {
    let tape = Tape::new();
    let w = tape.leaf(t(&[3], &[0.3, -2.0, 7.0]), true).unwrap();
    let loss = tape.sum(w).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_contract() {
    let tape = Tape::new();
    let w = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true).unwrap();
    assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    let loss = tape.sum(w).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::Usage(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(t(&[2], &[1.0, 2.0])).unwrap();
    let w = tape.leaf(t(&[2], &[3.0, 4.0]), true).unwrap();
    let loss = tape.sum(tape.mul(c, w).unwrap()).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
}
