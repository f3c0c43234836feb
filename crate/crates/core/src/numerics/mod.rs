//! Dense tensors, a reverse-mode tape and the optimizer.

pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use kernels::{AttnLayout, Segment, LAYER_NORM_EPS};
pub use optim::{Adam, AdamConfig, StepStats, WarmupSchedule};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tape::{sigmoid, Binary, Tape, Unary, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Value-level matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut t = Tape::eval();
    let (a, b) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.matmul(a, b)?;
    Ok(t.value(c).clone())
}

/// Value-level row softmax.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut t = Tape::eval();
    let x = t.constant(x.clone());
    let y = t.softmax_rows(x)?;
    Ok(t.value(y).clone())
}

/// Value-level `LayerNorm(a + b)` with affine `gain`/`bias`.
pub fn layer_norm_residual(a: &Tensor, b: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut t = Tape::eval();
    let (a, b) = (t.constant(a.clone()), t.constant(b.clone()));
    let (g, bb) = (t.constant(gain.clone()), t.constant(bias.clone()));
    let y = t.layer_norm_residual(a, b, g, bb)?;
    Ok(t.value(y).clone())
}
