//! Minimal differentiable tensor core.

mod gradcheck;
pub mod layers;
pub mod kernels;
mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, rel_error, GradReport};
pub use layers::{same_padding, Conv};
pub use kernels::{conv2d, downsample2x, global_avg_pool, log_softmax, matmul, sigmoid, softmax, upsample_aligned};
pub use params::{fan_in_uniform, Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{shape_err, Result};

/// Aligned 2× upsampling: source sample `(h, w)` lands on `(2h, 2w)`.
pub fn upsample2x_aligned(x: &Tensor) -> Result<Tensor> {
    upsample_aligned(x, 2)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("elementwise_mul", a, b)?;
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

pub fn sigmoid_map(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = parts.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = tape.concat(&vars, axis)?;
    Ok(out.tensor())
}
