//! Differentiable operations on [`Var`].

use crate::error::{arg_err, shape_err, Result};
use crate::numerics::kernels::{self, axis_split, broadcast_index, broadcast_shape};
use crate::numerics::tape::{BackwardArgs, Var};
use crate::numerics::{Tape, Tensor};

fn ensure_same_tape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(arg_err(op, "operands live on different tapes"))
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    /// Partial derivatives `(∂/∂a, ∂/∂b)`.
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, op: Binary) -> Result<Var<'t>> {
        ensure_same_tape(op.name(), &self, &other)?;
        let (value, ia, ib, la, lb) = {
            let a = self.value();
            let b = other.value();
            let out_shape = broadcast_shape(op.name(), a.shape(), b.shape())?;
            let ia = broadcast_index(a.shape(), &out_shape);
            let ib = broadcast_index(b.shape(), &out_shape);
            let (ad, bd) = (a.data(), b.data());
            let data = ia.iter().zip(&ib).map(|(&i, &j)| op.apply(ad[i], bd[j])).collect();
            (Tensor::new(out_shape, data)?, ia, ib, a.len(), b.len())
        };
        Ok(self.tape.record(
            &[self, other],
            value,
            Box::new(move |args: &BackwardArgs<'_>| {
                let (ad, bd) = (args.inputs[0].data(), args.inputs[1].data());
                let mut ga = args.needs[0].then(|| vec![0.0; la]);
                let mut gb = args.needs[1].then(|| vec![0.0; lb]);
                for ((&i, &j), &g) in ia.iter().zip(&ib).zip(args.grad) {
                    let (da, db) = op.partials(ad[i], bd[j]);
                    if let Some(ga) = ga.as_mut() {
                        ga[i] += g * da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] += g * db;
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum with same-rank broadcasting over unit extents.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let value = self.value().map(f);
        self.tape.record(
            &[self],
            value,
            Box::new(move |args: &BackwardArgs<'_>| {
                let x = args.inputs[0].data();
                let y = args.output.data();
                let g = args
                    .grad
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * df(x[i], y[i]))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(kernels::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(kernels::softplus, |x, _| kernels::sigmoid(x))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(self) -> Var<'t> {
        let (value, n) = {
            let v = self.value();
            (Tensor::scalar(v.data().iter().sum()), v.len())
        };
        self.tape.record(
            &[self],
            value,
            Box::new(move |args: &BackwardArgs<'_>| vec![Some(vec![args.grad[0]; n])]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums over `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let (value, shape) = {
            let v = self.value();
            let (outer, n, inner) = axis_split(v.shape(), axis)?;
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        out[o * inner + i] += v.data()[(o * n + k) * inner + i];
                    }
                }
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = 1;
            (Tensor::new(shape, out)?, v.shape().to_vec())
        };
        Ok(self.tape.record(
            &[self],
            value,
            Box::new(move |args: &BackwardArgs<'_>| {
                let (outer, n, inner) = axis_split(&shape, axis).expect("checked in forward");
                let mut g = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            g[(o * n + k) * inner + i] = args.grad[o * inner + i];
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let value = kernels::softmax(&self.value(), axis)?;
        Ok(self.tape.record(
            &[self],
            value,
            Box::new(move |args: &BackwardArgs<'_>| {
                let y = args.output;
                let (outer, n, inner) = axis_split(y.shape(), axis).expect("checked in forward");
                let (yd, gd) = (y.data(), args.grad);
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| gd[idx(k)] * yd[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let value = kernels::log_softmax(&self.value(), axis)?;
        Ok(self.tape.record(
            &[self],
            value,
            Box::new(move |args: &BackwardArgs<'_>| {
                let y = args.output;
                let (outer, n, inner) = axis_split(y.shape(), axis).expect("checked in forward");
                let (yd, gd) = (y.data(), args.grad);
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let total: f64 = (0..n).map(|k| gd[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = gd[idx(k)] - yd[idx(k)].exp() * total;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        ensure_same_tape("matmul", &self, &other)?;
        let value = kernels::matmul(&self.value(), &other.value())?;
        Ok(self.tape.record(
            &[self, other],
            value,
            Box::new(|args: &BackwardArgs<'_>| {
                let (a, b) = (args.inputs[0], args.inputs[1]);
                let (m, k) = a.dims2().expect("matrix");
                let n = b.shape()[1];
                let ga = args.needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, args.grad, false, b.data(), true, &mut ga, false);
                    ga
                });
                let gb = args.needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, a.data(), true, args.grad, false, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Matrix transpose.
    pub fn transpose(self) -> Result<Var<'t>> {
        let (value, (r, c)) = {
            let v = self.value();
            let (r, c) = v.dims2()?;
            (Tensor::from_fn(&[c, r], |i| v.data()[(i % r) * c + i / r]), (r, c))
        };
        Ok(self.tape.record(
            &[self],
            value,
            Box::new(move |args: &BackwardArgs<'_>| {
                let g = (0..r * c).map(|i| args.grad[(i % c) * r + i / c]).collect();
                vec![Some(g)]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tensor().reshape(shape)?;
        Ok(self.tape.record(
            &[self],
            value,
            Box::new(|args: &BackwardArgs<'_>| vec![Some(args.grad.to_vec())]),
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let (value, in_shape) = {
            let v = self.value();
            let (outer, n, inner) = axis_split(v.shape(), axis)?;
            if start > end || end > n {
                return Err(shape_err(
                    "slice",
                    format!("range {start}..{end} outside extent {n} on axis {axis}"),
                ));
            }
            let m = end - start;
            let mut data = Vec::with_capacity(outer * m * inner);
            for o in 0..outer {
                data.extend_from_slice(&v.data()[(o * n + start) * inner..(o * n + end) * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = m;
            (Tensor::new(shape, data)?, v.shape().to_vec())
        };
        Ok(self.tape.record(
            &[self],
            value,
            Box::new(move |args: &BackwardArgs<'_>| {
                let (outer, n, inner) = axis_split(&in_shape, axis).expect("checked in forward");
                let m = end - start;
                let mut g = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    g[(o * n + start) * inner..(o * n + end) * inner]
                        .copy_from_slice(&args.grad[o * m * inner..(o + 1) * m * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Convolution with optional per-output-channel bias.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        ensure_same_tape("conv2d", &self, &weight)?;
        let value = {
            let b = bias.map(|b| b.value());
            kernels::conv2d(&self.value(), &weight.value(), b.as_deref(), stride, pad)?
        };
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape.record(
            &parents,
            value,
            Box::new(move |args: &BackwardArgs<'_>| {
                let need_b = args.needs.get(2).copied().unwrap_or(false);
                let g = kernels::conv2d_backward(
                    args.inputs[0],
                    args.inputs[1],
                    args.grad,
                    stride,
                    pad,
                    [args.needs[0], args.needs[1], need_b],
                )
                .expect("geometry checked in forward");
                let mut out = vec![g.x, g.w];
                if args.inputs.len() == 3 {
                    out.push(g.bias);
                }
                out
            }),
        ))
    }

    /// Aligned bilinear upsampling by an integer factor (see
    /// [`kernels::upsample_aligned`]).
    pub fn upsample_aligned(self, factor: usize) -> Result<Var<'t>> {
        let value = kernels::upsample_aligned(&self.value(), factor)?;
        Ok(self.tape.record(
            &[self],
            value,
            Box::new(move |args: &BackwardArgs<'_>| {
                let (c, h, w) = args.inputs[0].dims3().expect("checked in forward");
                vec![Some(kernels::upsample_aligned_adjoint(args.grad, c, h, w, factor))]
            }),
        ))
    }

    /// Keeps the top-left `h×w` window of a `C×H×W` map.
    pub fn crop_hw(self, h: usize, w: usize) -> Result<Var<'t>> {
        let (c, hh, ww) = self.value().dims3()?;
        if h > hh || w > ww {
            return Err(shape_err("crop_hw", format!("{h}×{w} exceeds {hh}×{ww}")));
        }
        if h == hh && w == ww {
            return Ok(self);
        }
        let idx: Vec<usize> = (0..c * h * w)
            .map(|i| {
                let ch = i / (h * w);
                let r = (i / w) % h;
                (ch * hh + r) * ww + i % w
            })
            .collect();
        self.gather(idx, &[c, h, w])
    }

    /// `C×H×W → C×1×1` spatial mean.
    pub fn gap(self) -> Result<Var<'t>> {
        let value = kernels::global_avg_pool(&self.value())?;
        Ok(self.tape.record(
            &[self],
            value,
            Box::new(|args: &BackwardArgs<'_>| {
                let (c, h, w) = args.inputs[0].dims3().expect("checked in forward");
                let n = (h * w) as f64;
                let g = (0..c * h * w).map(|i| args.grad[i / (h * w)] / n).collect();
                vec![Some(g)]
            }),
        ))
    }

    /// `out[i] = self.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(self, indices: Vec<usize>, shape: &[usize]) -> Result<Var<'t>> {
        let (value, n_in) = {
            let v = self.value();
            if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
                return Err(shape_err("gather", format!("index {bad} out of {}", v.len())));
            }
            let data = indices.iter().map(|&i| v.data()[i]).collect();
            (Tensor::new(shape.to_vec(), data)?, v.len())
        };
        Ok(self.tape.record(
            &[self],
            value,
            Box::new(move |args: &BackwardArgs<'_>| {
                let mut g = vec![0.0; n_in];
                for (&i, &gv) in indices.iter().zip(args.grad) {
                    g[i] += gv;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Bilinear samples of a `C×H×W` map at `points` (`(y, x)` in grid
    /// coordinates), laid out as `C×out_h×out_w`. Uses the border rule of
    /// [`kernels::bilinear_taps`].
    pub fn sample_bilinear(self, points: &[(f64, f64)], out_h: usize, out_w: usize) -> Result<Var<'t>> {
        if points.len() != out_h * out_w {
            return Err(shape_err(
                "sample_bilinear",
                format!("{} points for a {out_h}×{out_w} grid", points.len()),
            ));
        }
        let (c, h, w) = self.value().dims3()?;
        let taps: Vec<Option<[(usize, f64); 4]>> = points
            .iter()
            .map(|&(y, x)| kernels::bilinear_taps(y, x, h, w))
            .collect();
        let value = {
            let v = self.value();
            let plane = h * w;
            Tensor::from_fn(&[c, out_h, out_w], |i| {
                let (ch, p) = (i / points.len(), i % points.len());
                taps[p].map_or(0.0, |t| t.iter().map(|&(o, wt)| wt * v.data()[ch * plane + o]).sum())
            })
        };
        Ok(self.tape.record(
            &[self],
            value,
            Box::new(move |args: &BackwardArgs<'_>| {
                let plane = h * w;
                let n = taps.len();
                let mut g = vec![0.0; c * plane];
                for ch in 0..c {
                    for (p, t) in taps.iter().enumerate() {
                        if let Some(t) = t {
                            let gv = args.grad[ch * n + p];
                            for &(o, wt) in t {
                                g[ch * plane + o] += wt * gv;
                            }
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

impl Tape {
    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| arg_err("concat", "no operands"))?;
        for p in parts {
            ensure_same_tape("concat", first, p)?;
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        let rank = shapes[0].len();
        axis_split(&shapes[0], axis)?;
        for s in &shapes {
            let ok = s.len() == rank && (0..rank).all(|d| d == axis || s[d] == shapes[0][d]);
            if !ok {
                return Err(shape_err(
                    "concat",
                    format!("{:?} incompatible with {:?} on axis {axis}", s, shapes[0]),
                ));
            }
        }
        let extents: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        let total: usize = extents.iter().sum();
        let outer: usize = shapes[0][..axis].iter().product();
        let inner: usize = shapes[0][axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            for o in 0..outer {
                for (v, &n) in values.iter().zip(&extents) {
                    data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
                }
            }
        }
        let mut shape = shapes[0].clone();
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.record(
            parts,
            value,
            Box::new(move |args: &BackwardArgs<'_>| {
                let mut grads: Vec<Option<Vec<f64>>> =
                    extents.iter().map(|&n| Some(vec![0.0; outer * n * inner])).collect();
                for o in 0..outer {
                    let mut offset = o * total * inner;
                    for (g, &n) in grads.iter_mut().zip(&extents) {
                        let len = n * inner;
                        g.as_mut().expect("allocated")[o * len..(o + 1) * len]
                            .copy_from_slice(&args.grad[offset..offset + len]);
                        offset += len;
                    }
                }
                grads
                    .into_iter()
                    .zip(&args.needs)
                    .map(|(g, &need)| if need { g } else { None })
                    .collect()
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::ones(&[2, 2, 3]));
        let s = tape.var(Tensor::new(vec![2, 1, 1], vec![2.0, 3.0]).unwrap());
        let y = x.mul(s).unwrap().sum();
        assert_eq!(y.item().unwrap(), 2.0 * 6.0 + 3.0 * 6.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(s).data(), &[6.0, 6.0]);
        assert_eq!(g.wrt(x).data()[0], 2.0);
        assert_eq!(g.wrt(x).data()[11], 3.0);
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[3, 2]));
        assert!(a.add(b).is_err());
        assert!(a.add(tape.var(Tensor::zeros(&[6]))).is_err());
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let tape = Tape::new();
        let a = tape.var(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
        let b = tape.var(Tensor::from_fn(&[3, 2, 2], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(c.shape(), vec![5, 2, 2]);
        let back = c.slice(0, 2, 5).unwrap();
        assert_eq!(back.tensor().data(), b.tensor().data());
        assert!(tape.concat(&[a, tape.var(Tensor::zeros(&[1, 3, 2]))], 0).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[2]));
        assert!(tape.backward(a.exp()).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[3]));
        let b = tape.var(Tensor::ones(&[3]));
        let y = a.mul(b).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.wrt(b).data(), &[1.0; 3]);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_vec(vec![-2.0, 0.0, 3.0]));
        let g = tape.backward(x.abs().sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[-1.0, 0.0, 1.0]);
    }
}
