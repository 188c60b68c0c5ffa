//! Eager numeric kernels shared by the tape and the eager module APIs.
//!
//! Convolution lowers to im2col + GEMM (via `matrixmultiply`). Everything is
//! single-threaded.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::numerics::Tensor;

/// Row-major `C += op(A)·op(B)` (or `C = ...` when `accumulate` is false).
///
/// `a` is `m×k` (stored `k×m` when `trans_a`), `b` is `k×n` (stored `n×k`
/// when `trans_b`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(arg_err("conv2d", "stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(shape_err(
            "conv2d",
            format!("padded extent {padded} is smaller than kernel extent {kernel}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, wd) = x.dims3()?;
        let [c_out, wc_in, kh, kw] = w.shape()[..] else {
            return Err(shape_err(
                "conv2d",
                format!("kernel must be C_out×C_in×J×K, got {:?}", w.shape()),
            ));
        };
        if wc_in != c_in {
            return Err(shape_err(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {wc_in}"),
            ));
        }
        let ho = conv_out_extent(h, kh, stride, pad)?;
        let wo = conv_out_extent(wd, kw, stride, pad)?;
        Ok(Self {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.ho * g.wo;
    let mut out = vec![0.0; g.c_in * g.kh * g.kw * cols];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for j in 0..g.kh {
            for k in 0..g.kw {
                let row = ((ci * g.kh + j) * g.kw + k) * cols;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + j) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let dst = &mut out[row + oh * g.wo..row + (oh + 1) * g.wo];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + k) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            *d = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.ho * g.wo;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        for j in 0..g.kh {
            for k in 0..g.kw {
                let row = ((ci * g.kh + j) * g.kw + k) * n;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + j) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + ih as usize) * g.w;
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + k) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            x[base + iw as usize] += cols[row + oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation of a `C_in×H×W` map with a `C_out×C_in×J×K` kernel.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(shape_err(
                "conv2d",
                format!("bias has {} entries for {} output channels", b.len(), g.c_out),
            ));
        }
    }
    let n = g.ho * g.wo;
    let kk = g.c_in * g.kh * g.kw;
    let mut out = vec![0.0; g.c_out * n];
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(n.max(1)).enumerate() {
            row.iter_mut().for_each(|v| *v = b.data()[co]);
        }
    }
    if g.is_pointwise() {
        gemm(g.c_out, kk, n, w.data(), false, x.data(), false, &mut out, true);
    } else {
        let cols = im2col(x.data(), &g);
        gemm(g.c_out, kk, n, w.data(), false, &cols, false, &mut out, true);
    }
    Tensor::new(vec![g.c_out, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub w: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &[f64],
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    let n = g.ho * g.wo;
    let kk = g.c_in * g.kh * g.kw;
    let gx = if need[0] {
        let mut gcols = vec![0.0; kk * n];
        gemm(kk, g.c_out, n, w.data(), true, gy, false, &mut gcols, false);
        Some(if g.is_pointwise() {
            gcols
        } else {
            col2im(&gcols, &g)
        })
    } else {
        None
    };
    let gw = if need[1] {
        let mut gw = vec![0.0; g.c_out * kk];
        if g.is_pointwise() {
            gemm(g.c_out, n, kk, gy, false, x.data(), true, &mut gw, false);
        } else {
            let cols = im2col(x.data(), &g);
            gemm(g.c_out, n, kk, gy, false, &cols, true, &mut gw, false);
        }
        Some(gw)
    } else {
        None
    };
    let gb = need[2].then(|| gy.chunks(n.max(1)).map(|r| r.iter().sum()).collect());
    Ok(ConvGrads {
        x: gx,
        w: gw,
        bias: gb,
    })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("inner extents differ: {:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// Source taps for one output row/column of aligned upsampling.
///
/// Output index `p` sits at source coordinate `p / factor`, so source sample
/// `i` lands exactly on output `i * factor`, matching the sampling grid of a
/// stride-`factor` convolution. Past the last source sample the edge value is
/// held.
fn aligned_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|p| {
            let i0 = p / factor;
            let t = (p % factor) as f64 / factor as f64;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, t)
        })
        .collect()
}

pub fn upsample_aligned(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if factor == 0 {
        return Err(arg_err("upsample_aligned", "factor must be positive"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let rows = aligned_taps(h, factor);
    let cols = aligned_taps(w, factor);
    let src = x.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (p, &(r0, r1, tr)) in rows.iter().enumerate() {
            for (q, &(c0, c1, tc)) in cols.iter().enumerate() {
                let top = (1.0 - tc) * plane[r0 * w + c0] + tc * plane[r0 * w + c1];
                let bot = (1.0 - tc) * plane[r1 * w + c0] + tc * plane[r1 * w + c1];
                out[(ch * ho + p) * wo + q] = (1.0 - tr) * top + tr * bot;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Adjoint of [`upsample_aligned`]: maps an output-sized gradient back onto
/// the `c×h×w` source.
pub(crate) fn upsample_aligned_adjoint(g: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (ho, wo) = (h * factor, w * factor);
    let rows = aligned_taps(h, factor);
    let cols = aligned_taps(w, factor);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for (p, &(r0, r1, tr)) in rows.iter().enumerate() {
            for (q, &(c0, c1, tc)) in cols.iter().enumerate() {
                let v = g[(ch * ho + p) * wo + q];
                plane[r0 * w + c0] += (1.0 - tr) * (1.0 - tc) * v;
                plane[r0 * w + c1] += (1.0 - tr) * tc * v;
                plane[r1 * w + c0] += tr * (1.0 - tc) * v;
                plane[r1 * w + c1] += tr * tc * v;
            }
        }
    }
    out
}

/// Stride-2 subsampling `x[:, 2i, 2j]`, the sampling grid a stride-2 "same"
/// convolution reads its centers from.
pub fn downsample2x(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    Ok(Tensor::from_fn(&[c, ho, wo], |i| {
        let ch = i / (ho * wo);
        let r = (i / wo) % ho;
        let q = i % wo;
        x.at3(ch, 2 * r, 2 * q)
    }))
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..n {
                let e = (out[idx(k)] - m).exp();
                out[idx(k)] = e;
                s += e;
            }
            for k in 0..n {
                out[idx(k)] /= s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..n).map(|k| (out[idx(k)] - m).exp()).sum::<f64>().ln();
            for k in 0..n {
                out[idx(k)] -= lse;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-channel spatial mean, `C×H×W → C×1×1`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let n = (h * w) as f64;
    let data = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().sum::<f64>() / n)
        .collect();
    Tensor::new(vec![c, 1, 1], data)
}

/// Bilinear taps at fractional position `(y, x)` on an `h×w` grid.
///
/// Positions more than one cell outside the grid read zero; positions inside
/// that margin are clamped to the border row/column. Returns flat `y*w+x`
/// offsets with their weights.
pub fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Option<[(usize, f64); 4]> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let axis = |v: f64, n: usize| -> (usize, usize, f64) {
        let v = v.max(0.0);
        let lo = v.floor() as usize;
        if lo >= n - 1 {
            (n - 1, n - 1, 0.0)
        } else {
            (lo, lo + 1, v - lo as f64)
        }
    };
    let (y0, y1, ty) = axis(y, h);
    let (x0, x1, tx) = axis(x, w);
    Some([
        (y0 * w + x0, (1.0 - ty) * (1.0 - tx)),
        (y0 * w + x1, (1.0 - ty) * tx),
        (y1 * w + x0, ty * (1.0 - tx)),
        (y1 * w + x1, ty * tx),
    ])
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Result shape of broadcasting two equal-rank shapes (extents equal or 1).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, format!("rank differs: {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// For each flat index of `out`, the flat source index into a tensor of
/// `shape` broadcast to `out`.
pub(crate) fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if shape == out {
        return (0..n).collect();
    }
    let src = strides(shape);
    let dst = strides(out);
    (0..n)
        .map(|flat| {
            let mut idx = 0;
            for d in 0..out.len() {
                let coord = (flat / dst[d]) % out[d];
                if shape[d] != 1 {
                    idx += coord * src[d];
                }
            }
            idx
        })
        .collect()
}
