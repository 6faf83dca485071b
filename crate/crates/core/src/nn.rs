//! Layer building blocks over a [`Binder`].

use crate::error::Result;
use crate::params::Binder;
use crate::tensor::Var;

pub const LAYERNORM_EPS: f64 = 1e-6;

/// `x · W + b` (bias optional in the store).
pub fn linear(b: &Binder<'_>, name: &str, x: Var) -> Result<Var> {
    let t = b.tape();
    let y = t.matmul(x, b.param(&format!("{name}.w"))?)?;
    let bias = format!("{name}.b");
    if b.has(&bias) {
        t.add_row(y, b.param(&bias)?)
    } else {
        Ok(y)
    }
}

/// `fc2(gelu(fc1(x)))`
pub fn mlp(b: &Binder<'_>, name: &str, x: Var) -> Result<Var> {
    let h = linear(b, &format!("{name}.fc1"), x)?;
    let h = b.tape().gelu(h)?;
    linear(b, &format!("{name}.fc2"), h)
}

pub fn layernorm(b: &Binder<'_>, name: &str, x: Var) -> Result<Var> {
    b.tape().layernorm(
        x,
        b.param(&format!("{name}.gamma"))?,
        b.param(&format!("{name}.beta"))?,
        LAYERNORM_EPS,
    )
}
