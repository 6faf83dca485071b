#![allow(dead_code, clippy::needless_range_loop)]

pub mod gradients;
pub mod oracles;

use rand::Rng;
use rimae::config::Config;
use rimae::data::{generate_dataset, Dataset, GenDataOptions};
use rimae::params::{Binder, ParamStore};
use rimae::seed::derive_rng;
use rimae::tensor::{Tape, Tensor, Var};
use rimae::Result;

pub const H: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero gradients
/// from turning finite-difference noise into huge ratios.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = derive_rng(seed, &[77]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks the gradient of `f(inputs)` w.r.t. every input coordinate by
/// central differences. Returns the largest relative error.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true).unwrap()).collect();
    let loss = f(&tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone()).unwrap()).collect();
        t.item(f(&t, &vs).unwrap()).unwrap()
    };
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Weighted sum with fixed random weights, so every output coordinate
/// contributes a distinct gradient.
pub fn probe_sum(tape: &Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random_tensor(&tape.shape(y)?, seed))?;
    tape.sum(tape.mul(y, w)?)
}

/// Gradient check over parameters of `store` bound through a [`Binder`].
/// At most `per_tensor` coordinates are checked in every tensor.
pub fn check_params<F>(store: &ParamStore, per_tensor: usize, f: F) -> f64
where
    F: Fn(&Binder<'_>) -> Result<Var>,
{
    check_stores(&[store], per_tensor, |bs| f(&bs[0]))
}

/// Like [`check_params`] for several stores bound to one tape, e.g. a
/// student and its predictor.
pub fn check_stores<F>(stores: &[&ParamStore], per_tensor: usize, f: F) -> f64
where
    F: Fn(&[Binder<'_>]) -> Result<Var>,
{
    let tape = Tape::new();
    let binders: Vec<Binder<'_>> = stores.iter().map(|s| Binder::new(&tape, s, true)).collect();
    let loss = f(&binders).unwrap();
    let raw = tape.backward(loss).unwrap();
    let grads: Vec<ParamStore> = binders.iter().map(|b| b.gradients(&raw)).collect();
    let eval = |ss: &[ParamStore]| {
        let t = Tape::new();
        let bs: Vec<Binder<'_>> = ss.iter().map(|s| Binder::new(&t, s, false)).collect();
        t.item(f(&bs).unwrap()).unwrap()
    };
    let base: Vec<ParamStore> = stores.iter().map(|s| (*s).clone()).collect();
    let mut worst = 0.0f64;
    let mut rng = derive_rng(9, &[]);
    for (k, store) in stores.iter().enumerate() {
        for name in store.names() {
            let n = store.get(name).unwrap().numel();
            let coords: Vec<usize> = if n <= per_tensor {
                (0..n).collect()
            } else {
                (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
            };
            for i in coords {
                let mut plus = base.clone();
                plus[k].get_mut(name).unwrap().data_mut()[i] += H;
                let mut minus = base.clone();
                minus[k].get_mut(name).unwrap().data_mut()[i] -= H;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
                let analytic = grads[k].get(name).map_or(0.0, |g| g.data()[i]);
                let e = rel_err(analytic, numeric);
                if e > 1e-4 {
                    eprintln!("{name}[{i}]: analytic {analytic:e} numeric {numeric:e}");
                }
                worst = worst.max(e);
            }
        }
    }
    worst
}

/// Small model: width 32, two blocks, two heads.
pub fn desk_config() -> Config {
    let mut c = Config::default();
    c.model.dim = 32;
    c.model.depth = 2;
    c.model.heads = 2;
    c.optim.batch = 4;
    c.optim.epochs = 10;
    c.optim.warmup_epochs = 1;
    c
}

pub fn dataset(count: usize, seed: u64) -> Dataset {
    generate_dataset(&GenDataOptions { count, points: 256, seed, ..Default::default() }).unwrap()
}

/// Only the three asymmetric families.
pub fn asymmetric_dataset(count: usize, seed: u64) -> Dataset {
    use rimae::data::Family;
    generate_dataset(&GenDataOptions {
        families: vec![Family::Helix, Family::AsymmetricL, Family::SkewedEllipsoid],
        count,
        points: 256,
        seed,
        ..Default::default()
    })
    .unwrap()
}
