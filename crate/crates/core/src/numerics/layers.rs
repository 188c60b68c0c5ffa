//! Parameter bundles shared by the network modules.
//!
//! Bundles are generic over the handle type: `Tensor` for eager use,
//! [`ParamId`](super::ParamId) inside a model, [`Var`] once bound to a tape.

use rand::Rng;

use crate::error::{arg_err, Result};
use crate::numerics::{fan_in_uniform, Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Convolution weights `C_out×C_in×J×J` plus optional bias, applied with
/// "same" padding `(J-1)/2`.
#[derive(Clone, Debug)]
pub struct Conv<T = Tensor> {
    pub weight: T,
    pub bias: Option<T>,
}

impl<T> Conv<T> {
    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Conv<U> {
        Conv {
            weight: f(&self.weight),
            bias: self.bias.as_ref().map(f),
        }
    }
}

impl Conv<ParamId> {
    /// Registers a `c_out×c_in×k×k` kernel with fan-in uniform weights and,
    /// when `bias` is given, a bias filled with that value.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_out: usize,
        c_in: usize,
        kernel: usize,
        bias: Option<f64>,
    ) -> Self {
        let shape = [c_out, c_in, kernel, kernel];
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(rng, &shape, c_in * kernel * kernel));
        let bias = bias.map(|b| store.add(format!("{name}.bias"), Tensor::full(&[c_out], b)));
        Conv { weight, bias }
    }

    pub fn bind<'t>(&self, b: &Bound<'t>) -> Conv<Var<'t>> {
        self.map(|&id| b[id])
    }
}

impl Conv<Tensor> {
    pub fn constants<'t>(&self, tape: &'t Tape) -> Conv<Var<'t>> {
        self.map(|t| tape.constant(t.clone()))
    }
}

/// Symmetric zero padding that preserves spatial size for an odd kernel.
pub fn same_padding(kernel: usize) -> Result<usize> {
    if kernel % 2 == 0 {
        return Err(arg_err("same_padding", format!("kernel extent {kernel} is even")));
    }
    Ok((kernel - 1) / 2)
}

fn square_kernel(shape: &[usize]) -> Result<usize> {
    match shape {
        [_, _, j, k] if j == k => Ok(*j),
        _ => Err(arg_err(
            "Conv",
            format!("expected a square C_out×C_in×J×J kernel, got {shape:?}"),
        )),
    }
}

impl<'t> Conv<Var<'t>> {
    pub fn forward(&self, x: Var<'t>, stride: usize) -> Result<Var<'t>> {
        let k = square_kernel(&self.weight.shape())?;
        x.conv2d(self.weight, self.bias, stride, same_padding(k)?)
    }
}

impl Conv<Tensor> {
    pub fn forward(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        let k = square_kernel(self.weight.shape())?;
        super::conv2d(x, &self.weight, self.bias.as_ref(), stride, same_padding(k)?)
    }
}
