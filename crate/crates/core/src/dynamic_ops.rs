//! Rank-1 dynamic linear and convolution operators.
//!
//! A static weight `W` is modulated per position by two dynamic factor maps:
//! `A` scales the input channels before the static operator and `B` scales
//! the output channels after it, so `Y = Conv(X ⊙ A) ⊙ B`. For a 1×1 kernel
//! this is exactly a per-position linear map with weight `W ⊙ b aᵀ`.

use crate::error::{arg_err, shape_err, Result};
use crate::numerics::{self, same_padding, Bound, Conv, ParamId, Tape, Tensor, Var};

/// Per-position input (`a`) and output (`b`) modulation maps, both `C×H×W`.
#[derive(Clone, Debug)]
pub struct Rank1Factors<T = Tensor> {
    pub a: T,
    pub b: T,
}

impl Rank1Factors<Tensor> {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        a.dims3()?;
        if a.shape() != b.shape() {
            return Err(shape_err(
                "Rank1Factors",
                format!("A is {:?} but B is {:?}", a.shape(), b.shape()),
            ));
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(arg_err("Rank1Factors", "factors must be finite"));
        }
        Ok(Self { a, b })
    }

    /// `A = B = 1`.
    pub fn unit(c: usize, h: usize, w: usize) -> Self {
        Self {
            a: Tensor::ones(&[c, h, w]),
            b: Tensor::ones(&[c, h, w]),
        }
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> Rank1Factors<Var<'t>> {
        Rank1Factors {
            a: tape.constant(self.a.clone()),
            b: tape.constant(self.b.clone()),
        }
    }
}

/// The static half of a DR1Conv: a channel-preserving `C×C×J×J` kernel with
/// odd `J` and optional bias.
#[derive(Clone, Debug)]
pub struct DR1ConvLayer<T = Tensor> {
    pub conv: Conv<T>,
}

impl<T> DR1ConvLayer<T> {
    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> DR1ConvLayer<U> {
        DR1ConvLayer { conv: self.conv.map(f) }
    }
}

impl DR1ConvLayer<ParamId> {
    pub fn bind<'t>(&self, b: &Bound<'t>) -> DR1ConvLayer<Var<'t>> {
        DR1ConvLayer { conv: self.conv.bind(b) }
    }
}

impl DR1ConvLayer<Tensor> {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        validate_layer_shape(weight.shape())?;
        if let Some(b) = &bias {
            if b.len() != weight.shape()[0] {
                return Err(shape_err("DR1ConvLayer", "bias length differs from channel width"));
            }
        }
        Ok(Self {
            conv: Conv { weight, bias },
        })
    }

    pub fn channels(&self) -> usize {
        self.conv.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.conv.weight.shape()[2]
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> DR1ConvLayer<Var<'t>> {
        DR1ConvLayer {
            conv: self.conv.constants(tape),
        }
    }
}

pub(crate) fn validate_layer_shape(shape: &[usize]) -> Result<()> {
    match shape {
        [co, ci, j, k] if co == ci && j == k && j % 2 == 1 => Ok(()),
        _ => Err(shape_err(
            "DR1ConvLayer",
            format!("kernel must be C×C×J×J with odd J, got {shape:?}"),
        )),
    }
}

fn vec_len(t: &Tensor, op: &'static str, what: &str) -> Result<usize> {
    match t.shape() {
        [n] => Ok(*n),
        s => Err(shape_err(op, format!("{what} must be a vector, got {s:?}"))),
    }
}

/// `W ⊙ (b aᵀ)` for `W: m×d`, `a: d`, `b: m`.
pub fn rank1_modulate(w: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, d) = w.dims2()?;
    if vec_len(a, "rank1_modulate", "a")? != d || vec_len(b, "rank1_modulate", "b")? != m {
        return Err(shape_err(
            "rank1_modulate",
            format!("W is {m}×{d}, a has {}, b has {}", a.len(), b.len()),
        ));
    }
    Ok(Tensor::from_fn(&[m, d], |i| {
        w.data()[i] * b.data()[i / d] * a.data()[i % d]
    }))
}

/// `(W (x ⊙ a)) ⊙ b` without forming the modulated matrix.
pub fn dr1_linear(w: &Tensor, x: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, d) = w.dims2()?;
    let xs = vec_len(x, "dr1_linear", "x")?;
    if xs != d || vec_len(a, "dr1_linear", "a")? != d || vec_len(b, "dr1_linear", "b")? != m {
        return Err(shape_err(
            "dr1_linear",
            format!("W is {m}×{d}, x has {xs}, a has {}, b has {}", a.len(), b.len()),
        ));
    }
    let xa: Vec<f64> = x.data().iter().zip(a.data()).map(|(x, a)| x * a).collect();
    let y = (0..m)
        .map(|r| {
            let row = &w.data()[r * d..(r + 1) * d];
            row.iter().zip(&xa).map(|(w, v)| w * v).sum::<f64>() * b.data()[r]
        })
        .collect();
    Ok(Tensor::from_vec(y))
}

fn check_operands(x: &Tensor, factors: &Rank1Factors, layer: &DR1ConvLayer) -> Result<()> {
    let (c, _, _) = x.dims3()?;
    if x.shape() != factors.a.shape() || x.shape() != factors.b.shape() {
        return Err(shape_err(
            "dr1conv",
            format!(
                "X {:?}, A {:?}, B {:?} must share a shape",
                x.shape(),
                factors.a.shape(),
                factors.b.shape()
            ),
        ));
    }
    if layer.channels() != c {
        return Err(shape_err(
            "dr1conv",
            format!("layer width {} but X has {c} channels", layer.channels()),
        ));
    }
    Ok(())
}

/// `Conv(X ⊙ A) ⊙ B` with size-preserving padding.
pub fn dr1conv(x: &Tensor, factors: &Rank1Factors, layer: &DR1ConvLayer) -> Result<Tensor> {
    check_operands(x, factors, layer)?;
    let xa = numerics::elementwise_mul(x, &factors.a)?;
    let y = layer.conv.forward(&xa, 1)?;
    numerics::elementwise_mul(&y, &factors.b)
}

/// Differentiable [`dr1conv`].
pub fn dr1conv_var<'t>(
    x: Var<'t>,
    factors: &Rank1Factors<Var<'t>>,
    layer: &DR1ConvLayer<Var<'t>>,
) -> Result<Var<'t>> {
    let xs = x.shape();
    if xs.len() != 3 || factors.a.shape() != xs || factors.b.shape() != xs {
        return Err(shape_err(
            "dr1conv",
            format!(
                "X {:?}, A {:?}, B {:?} must share a C×H×W shape",
                xs,
                factors.a.shape(),
                factors.b.shape()
            ),
        ));
    }
    validate_layer_shape(&layer.conv.weight.shape())?;
    if layer.conv.weight.shape()[0] != xs[0] {
        return Err(shape_err("dr1conv", "layer width differs from X channels"));
    }
    let y = layer.conv.forward(x.mul(factors.a)?, 1)?;
    y.mul(factors.b)
}

fn check_ratio(p: &[usize], above: &[usize]) -> Result<()> {
    let ok = p.len() == 3
        && above.len() == 3
        && p[0] == above[0]
        && above[1] == p[1].div_ceil(2)
        && above[2] == p[2].div_ceil(2);
    if ok {
        Ok(())
    } else {
        Err(shape_err(
            "dense_merge_level",
            format!("coarser level {above:?} is not half of reduced level {p:?}"),
        ))
    }
}

/// One top-down merge step:
/// `F_l = DR1Conv_{A_l,B_l}(Conv3×3(P_l) + up2(F_{l+1}))`, with the upsample
/// term dropped at the coarsest level. The upsampled map is cropped to the
/// finer extent when that extent is odd.
pub fn dense_merge_level(
    p: &Tensor,
    above: Option<&Tensor>,
    factors: &Rank1Factors,
    reduce: &Conv,
    layer: &DR1ConvLayer,
) -> Result<Tensor> {
    let tape = Tape::new();
    let above = above.map(|t| tape.constant(t.clone()));
    let out = dense_merge_level_var(
        tape.constant(p.clone()),
        above,
        &factors.constants(&tape),
        &reduce.constants(&tape),
        &layer.constants(&tape),
    )?;
    Ok(out.tensor())
}

/// Differentiable [`dense_merge_level`].
pub fn dense_merge_level_var<'t>(
    p: Var<'t>,
    above: Option<Var<'t>>,
    factors: &Rank1Factors<Var<'t>>,
    reduce: &Conv<Var<'t>>,
    layer: &DR1ConvLayer<Var<'t>>,
) -> Result<Var<'t>> {
    let reduced = reduce.forward(p, 1)?;
    let merged = match above {
        Some(f) => {
            let rs = reduced.shape();
            check_ratio(&rs, &f.shape())?;
            reduced.add(f.upsample_aligned(2)?.crop_hw(rs[1], rs[2])?)?
        }
        None => reduced,
    };
    dr1conv_var(merged, factors, layer)
}

/// Position-dependent kernels for [`oracle_dense_dynamic_conv`].
pub enum PositionKernels<'a> {
    /// One `C_out×C_in×J×J` kernel per output position, row-major over `H×W`.
    Explicit(&'a [Tensor]),
    /// Kernels induced by rank-1 factors:
    /// `K_hw[o,i,j,k] = B[o,h,w] · W[o,i,j,k] · A[i, h+j-p, w+k-p]`.
    Rank1 {
        weight: &'a Tensor,
        factors: &'a Rank1Factors,
    },
}

/// Brute-force position-dependent convolution with size-preserving padding.
///
/// Each output position materializes its full kernel before applying it, so
/// the cost is `O(C²J²)` extra work per position compared with [`dr1conv`].
pub fn oracle_dense_dynamic_conv(x: &Tensor, kernels: &PositionKernels<'_>) -> Result<Tensor> {
    let (c_in, h, w) = x.dims3()?;
    let kshape: Vec<usize> = match kernels {
        PositionKernels::Explicit(ks) => {
            if ks.len() != h * w {
                return Err(shape_err(
                    "oracle_dense_dynamic_conv",
                    format!("{} kernels for a {h}×{w} map", ks.len()),
                ));
            }
            let s = ks[0].shape().to_vec();
            if ks.iter().any(|k| k.shape() != s.as_slice()) {
                return Err(shape_err("oracle_dense_dynamic_conv", "kernels differ in shape"));
            }
            s
        }
        PositionKernels::Rank1 { weight, factors } => {
            if factors.a.shape() != x.shape() || factors.b.shape()[1..] != x.shape()[1..] {
                return Err(shape_err("oracle_dense_dynamic_conv", "factor maps do not match X"));
            }
            if factors.b.shape()[0] != weight.shape()[0] {
                return Err(shape_err("oracle_dense_dynamic_conv", "B width differs from kernel"));
            }
            weight.shape().to_vec()
        }
    };
    let [c_out, kc_in, kh, kw] = kshape[..] else {
        return Err(shape_err("oracle_dense_dynamic_conv", "kernels must be rank 4"));
    };
    if kc_in != c_in || kh != kw {
        return Err(shape_err(
            "oracle_dense_dynamic_conv",
            format!("kernel {kshape:?} incompatible with {c_in} input channels"),
        ));
    }
    let pad = same_padding(kh)?;
    let taps = kh * kw;
    let mut out = vec![0.0; c_out * h * w];
    let mut scratch = vec![0.0; c_out * c_in * taps];
    let mut patch = vec![0.0; c_in * taps];
    for r in 0..h {
        for q in 0..w {
            for ci in 0..c_in {
                for j in 0..kh {
                    for k in 0..kw {
                        let y = (r + j) as isize - pad as isize;
                        let xx = (q + k) as isize - pad as isize;
                        let inside = y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w;
                        patch[(ci * kh + j) * kw + k] = if inside {
                            x.at3(ci, y as usize, xx as usize)
                        } else {
                            0.0
                        };
                    }
                }
            }
            let kernel: &[f64] = match kernels {
                PositionKernels::Explicit(ks) => ks[r * w + q].data(),
                PositionKernels::Rank1 { weight, factors } => {
                    for o in 0..c_out {
                        let bo = factors.b.at3(o, r, q);
                        for ci in 0..c_in {
                            for j in 0..kh {
                                for k in 0..kw {
                                    let y = (r + j) as isize - pad as isize;
                                    let xx = (q + k) as isize - pad as isize;
                                    let inside = y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w;
                                    let a = if inside {
                                        factors.a.at3(ci, y as usize, xx as usize)
                                    } else {
                                        0.0
                                    };
                                    let idx = ((o * c_in + ci) * kh + j) * kw + k;
                                    scratch[idx] = bo * weight.data()[idx] * a;
                                }
                            }
                        }
                    }
                    &scratch
                }
            };
            let n = c_in * taps;
            for o in 0..c_out {
                let row = &kernel[o * n..(o + 1) * n];
                out[(o * h + r) * w + q] = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
            }
        }
    }
    Tensor::new(vec![c_out, h, w], out)
}

/// Dynamic scalars stored per position by the rank-1 scheme: `2C`.
pub fn rank1_state_per_position(channels: usize) -> usize {
    2 * channels
}

/// Scalars per position for an unconstrained dynamic kernel: `C²·J·K`.
pub fn full_dynamic_kernel_per_position(channels: usize, j: usize, k: usize) -> usize {
    channels * channels * j * k
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn unit_modulation_is_identity() {
        let mut r = rng(0);
        let w = Tensor::rand_uniform(&mut r, &[3, 4], -1.0, 1.0);
        let out = rank1_modulate(&w, &Tensor::ones(&[4]), &Tensor::ones(&[3])).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn diagonal_modulation() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let out = rank1_modulate(&eye, &a, &Tensor::ones(&[3])).unwrap();
        let want = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { (i / 4 + 1) as f64 } else { 0.0 });
        assert_eq!(out, want);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let w = Tensor::zeros(&[3, 4]);
        assert!(rank1_modulate(&w, &Tensor::zeros(&[3]), &Tensor::zeros(&[3])).is_err());
        assert!(dr1_linear(&w, &Tensor::zeros(&[3]), &Tensor::zeros(&[4]), &Tensor::zeros(&[3])).is_err());
        assert!(dr1_linear(&w, &Tensor::zeros(&[4]), &Tensor::zeros(&[4]), &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn linear_unit_factors_and_zero_input() {
        let mut r = rng(1);
        let w = Tensor::rand_uniform(&mut r, &[3, 5], -1.0, 1.0);
        let x = Tensor::rand_uniform(&mut r, &[5], -1.0, 1.0);
        let y = dr1_linear(&w, &x, &Tensor::ones(&[5]), &Tensor::ones(&[3])).unwrap();
        let wx = numerics::matmul(&w, &x.clone().reshape(&[5, 1]).unwrap()).unwrap();
        assert!(y.data().iter().zip(wx.data()).all(|(a, b)| (a - b).abs() < 1e-15));
        let a = Tensor::rand_uniform(&mut r, &[5], -1.0, 1.0);
        let b = Tensor::rand_uniform(&mut r, &[3], -1.0, 1.0);
        let z = dr1_linear(&w, &Tensor::zeros(&[5]), &a, &b).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_must_be_square_and_odd() {
        assert!(DR1ConvLayer::new(Tensor::zeros(&[4, 3, 3, 3]), None).is_err());
        assert!(DR1ConvLayer::new(Tensor::zeros(&[4, 4, 2, 2]), None).is_err());
        assert!(DR1ConvLayer::new(Tensor::zeros(&[4, 4, 3, 1]), None).is_err());
        assert!(DR1ConvLayer::new(Tensor::zeros(&[4, 4, 3, 3]), Some(Tensor::zeros(&[3]))).is_err());
        assert!(DR1ConvLayer::new(Tensor::zeros(&[4, 4, 3, 3]), None).is_ok());
    }

    #[test]
    fn dr1conv_unit_factors_equal_conv() {
        let mut r = rng(2);
        let x = Tensor::rand_uniform(&mut r, &[4, 6, 7], -1.0, 1.0);
        let layer = DR1ConvLayer::new(Tensor::rand_uniform(&mut r, &[4, 4, 3, 3], -1.0, 1.0), None).unwrap();
        let y = dr1conv(&x, &Rank1Factors::unit(4, 6, 7), &layer).unwrap();
        let plain = numerics::conv2d(&x, &layer.conv.weight, None, 1, 1).unwrap();
        assert!(y.max_abs_diff(&plain) <= 1e-12);
    }

    #[test]
    fn dr1conv_identity_pointwise_is_triple_product() {
        let mut r = rng(3);
        let x = Tensor::rand_uniform(&mut r, &[3, 4, 4], -1.0, 1.0);
        let f = Rank1Factors::new(
            Tensor::rand_uniform(&mut r, &[3, 4, 4], -1.0, 1.0),
            Tensor::rand_uniform(&mut r, &[3, 4, 4], -1.0, 1.0),
        )
        .unwrap();
        let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = dr1conv(&x, &f, &DR1ConvLayer::new(eye, None).unwrap()).unwrap();
        for i in 0..x.len() {
            let want = x.data()[i] * f.a.data()[i] * f.b.data()[i];
            assert!((y.data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn dr1conv_shape_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let layer = DR1ConvLayer::new(Tensor::zeros(&[2, 2, 1, 1]), None).unwrap();
        let bad = Rank1Factors::unit(2, 4, 5);
        assert!(dr1conv(&x, &bad, &layer).is_err());
        let wide = DR1ConvLayer::new(Tensor::zeros(&[3, 3, 1, 1]), None).unwrap();
        assert!(dr1conv(&x, &Rank1Factors::unit(2, 4, 4), &wide).is_err());
    }

    #[test]
    fn merge_rejects_bad_ratio() {
        let p = Tensor::zeros(&[2, 5, 6]);
        let above = Tensor::zeros(&[2, 2, 3]);
        let reduce = Conv {
            weight: Tensor::zeros(&[2, 2, 3, 3]),
            bias: None,
        };
        let layer = DR1ConvLayer::new(Tensor::zeros(&[2, 2, 1, 1]), None).unwrap();
        let f = Rank1Factors::unit(2, 5, 6);
        assert!(dense_merge_level(&p, Some(&above), &f, &reduce, &layer).is_err());
        let ok = Tensor::zeros(&[2, 3, 3]);
        assert!(dense_merge_level(&p, Some(&ok), &f, &reduce, &layer).is_ok());
    }

    #[test]
    fn merge_with_zero_lateral_is_dr1_of_upsample() {
        let mut r = rng(4);
        let p = Tensor::zeros(&[2, 4, 6]);
        let above = Tensor::rand_uniform(&mut r, &[2, 2, 3], -1.0, 1.0);
        let reduce = Conv {
            weight: Tensor::rand_uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0),
            bias: None,
        };
        let layer = DR1ConvLayer::new(Tensor::rand_uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0), None).unwrap();
        let f = Rank1Factors::unit(2, 4, 6);
        let got = dense_merge_level(&p, Some(&above), &f, &reduce, &layer).unwrap();
        let up = numerics::upsample2x_aligned(&above).unwrap();
        let want = dr1conv(&up, &f, &layer).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn oracle_with_shared_kernel_is_conv() {
        let mut r = rng(5);
        let x = Tensor::rand_uniform(&mut r, &[3, 5, 4], -1.0, 1.0);
        let k = Tensor::rand_uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
        let ks = vec![k.clone(); 20];
        let got = oracle_dense_dynamic_conv(&x, &PositionKernels::Explicit(&ks)).unwrap();
        let want = numerics::conv2d(&x, &k, None, 1, 1).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
        assert!(oracle_dense_dynamic_conv(&x, &PositionKernels::Explicit(&ks[..19])).is_err());
    }

    #[test]
    fn parameter_economy_counts() {
        assert_eq!(rank1_state_per_position(64), 128);
        assert_eq!(full_dynamic_kernel_per_position(64, 3, 3), 36_864);
    }
}
