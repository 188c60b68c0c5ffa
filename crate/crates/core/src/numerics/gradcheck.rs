//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

/// Relative error with a unit floor on the denominator, so gradients near
/// zero are compared absolutely.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let y = f(tape.constant(x.clone()))?;
    let v = y.value();
    if v.len() != 1 {
        return Err(shape_err("grad_check", format!("function output has shape {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// over every coordinate of `x`.
pub fn grad_check<F>(op: &str, f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    check_coords(op, &f, x, eps, tol, &coords)
}

/// Like [`grad_check`] but only at `max_coords` coordinates drawn with `seed`.
pub fn grad_check_sampled<F>(
    op: &str,
    f: F,
    x: &Tensor,
    eps: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let coords = if x.len() <= max_coords {
        (0..x.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = sample(&mut rng, x.len(), max_coords).into_vec();
        c.sort_unstable();
        c
    };
    check_coords(op, &f, x, eps, tol, &coords)
}

fn check_coords<F>(op: &str, f: &F, x: &Tensor, eps: f64, tol: f64, coords: &[usize]) -> Result<GradReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(arg_err("grad_check", format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let y = f(xv)?;
        if y.value().len() != 1 {
            return Err(shape_err("grad_check", format!("function output has shape {:?}", y.shape())));
        }
        tape.backward(y)?.wrt(xv)
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = rel_error(analytic.data()[i], numeric);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(GradReport {
        op: op.to_string(),
        max_rel_error: worst,
        tolerance: tol,
        coords_checked: coords.len(),
        passed: worst < tol,
    })
}
