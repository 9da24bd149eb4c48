//! Layer helpers shared by the source models, adapters and baselines.
//! Parameters are looked up by name in a [`ParamStore`] on every call.

use rand::Rng;

use crate::autodiff::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::Result;

/// Fixed affine map applied to log-mel input before any learned layer.
pub const FEATURE_SHIFT: f64 = 6.0;
pub const FEATURE_SCALE: f64 = 0.25;

pub fn add_linear<R: Rng>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
    store.add_normal(&format!("{prefix}.weight"), &[fan_in, fan_out], (1.0 / fan_in as f32).sqrt(), rng)?;
    store.add_zeros(&format!("{prefix}.bias"), &[fan_out])
}

pub fn add_linear_zero(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    store.add_zeros(&format!("{prefix}.weight"), &[fan_in, fan_out])?;
    store.add_zeros(&format!("{prefix}.bias"), &[fan_out])
}

pub fn add_conv<R: Rng>(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Result<()> {
    let fan_in = (c_in * k * k) as f32;
    store.add_normal(&format!("{prefix}.weight"), &[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng)?;
    store.add_zeros(&format!("{prefix}.bias"), &[c_out])
}

pub fn add_conv_zero(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
    store.add_zeros(&format!("{prefix}.weight"), &[c_out, c_in, k, k])?;
    store.add_zeros(&format!("{prefix}.bias"), &[c_out])
}

pub fn add_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.add_full(&format!("{prefix}.gain"), &[dim], 1.0)?;
    store.add_zeros(&format!("{prefix}.bias"), &[dim])
}

/// Scalar count of a linear layer.
pub const fn linear_params(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

/// Scalar count of a square-kernel conv layer.
pub const fn conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + c_out
}

pub fn linear<F: Real>(tape: &mut Tape<F>, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param_named(store, &format!("{prefix}.weight"))?;
    let b = tape.param_named(store, &format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub fn conv<F: Real>(tape: &mut Tape<F>, store: &ParamStore, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = tape.param_named(store, &format!("{prefix}.weight"))?;
    let b = tape.param_named(store, &format!("{prefix}.bias"))?;
    tape.conv2d(x, w, b, stride, pad)
}

pub fn layer_norm<F: Real>(tape: &mut Tape<F>, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param_named(store, &format!("{prefix}.gain"))?;
    let b = tape.param_named(store, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b)
}

/// `(x + FEATURE_SHIFT) * FEATURE_SCALE`
pub fn scale_features<F: Real>(tape: &mut Tape<F>, x: Var) -> Result<Var> {
    let shift = tape.constant(Tensor::full(tape.shape(x), F::of(FEATURE_SHIFT)));
    let y = tape.add(x, shift)?;
    Ok(tape.scale(y, F::of(FEATURE_SCALE)))
}

/// Rows `[1, cols]` picked from a 2-d node.
pub fn row<F: Real>(tape: &mut Tape<F>, x: Var, index: usize) -> Result<Var> {
    let cols = tape.shape(x)[1];
    tape.gather(x, (index * cols..(index + 1) * cols).collect(), &[1, cols])
}
