//! Task heads and the combined loss.
//!
//! Instance embeddings use a fixed channel layout (see [`EmbeddingLayout`]):
//! a panoptic prefix of width `D′`, the mask kernel `t` (`K×D′`), the
//! attention factors `s` (`K×4`), then the 3D block
//! `[c_x, c_y, z, log h, log w, log l, sin α, cos α, attr…]`.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::geometry::{alpha_to_yaw, backproject, box_corners, yaw_to_alpha, Box3D, CameraIntrinsics, CORNER_SIGNS};
use crate::numerics::{Bound, Conv, ParamId, ParamStore, Tape, Tensor, Var};

/// Rank of each factored attention map.
pub const ATTENTION_RANK: usize = 4;
/// Side of each attention map before upsampling to the crop size.
pub const ATTENTION_SIZE: usize = 14;
/// Leading 3D channels before the attribute logits.
pub const E3D_FIXED: usize = 8;
pub const MIN_DEPTH: f64 = 1e-3;
pub const MAX_DEPTH: f64 = 120.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingLayout {
    pub dense_width: usize,
    pub bases: usize,
    pub attributes: usize,
}

impl EmbeddingLayout {
    pub fn new(dense_width: usize, bases: usize, attributes: usize) -> Self {
        Self {
            dense_width,
            bases,
            attributes,
        }
    }

    pub fn pano(&self) -> Range<usize> {
        0..self.dense_width
    }

    pub fn kernel(&self) -> Range<usize> {
        let lo = self.dense_width;
        lo..lo + self.dense_width * self.bases
    }

    pub fn factors(&self) -> Range<usize> {
        let lo = self.kernel().end;
        lo..lo + self.bases * ATTENTION_RANK
    }

    pub fn seg(&self) -> Range<usize> {
        0..self.factors().end
    }

    pub fn e3d(&self) -> Range<usize> {
        let lo = self.factors().end;
        lo..lo + E3D_FIXED + self.attributes
    }

    pub fn width(&self) -> usize {
        self.e3d().end
    }
}

/// Instance-specific mask parameters: kernel `t` (`K×D′`) and attention
/// factors `s` (`K×4`).
#[derive(Clone, Debug, PartialEq)]
pub struct SegEmbedding<T = Tensor> {
    pub t: T,
    pub s: T,
}

impl SegEmbedding<Tensor> {
    pub fn from_embedding(e: &[f64], layout: &EmbeddingLayout) -> Result<Self> {
        if e.len() < layout.seg().end {
            return Err(shape_err(
                "SegEmbedding",
                format!("embedding has {} values, layout needs {}", e.len(), layout.seg().end),
            ));
        }
        Ok(Self {
            t: Tensor::new(vec![layout.bases, layout.dense_width], e[layout.kernel()].to_vec())?,
            s: Tensor::new(vec![layout.bases, ATTENTION_RANK], e[layout.factors()].to_vec())?,
        })
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> SegEmbedding<Var<'t>> {
        SegEmbedding {
            t: tape.constant(self.t.clone()),
            s: tape.constant(self.s.clone()),
        }
    }
}

/// Attention bases shared by all instances, each `K×4×14`.
#[derive(Clone, Debug)]
pub struct AttentionBasis<T = Tensor> {
    pub u: T,
    pub v: T,
}

impl<T> AttentionBasis<T> {
    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> AttentionBasis<U> {
        AttentionBasis {
            u: f(&self.u),
            v: f(&self.v),
        }
    }
}

impl AttentionBasis<Tensor> {
    pub fn constants<'t>(&self, tape: &'t Tape) -> AttentionBasis<Var<'t>> {
        self.map(|t| tape.constant(t.clone()))
    }
}

/// Learned parameters per instance in factored attention.
pub fn factored_attention_params(bases: usize) -> usize {
    bases * ATTENTION_RANK
}

/// Learned parameters per instance if the attention maps were predicted
/// directly.
pub fn full_attention_params(bases: usize) -> usize {
    bases * ATTENTION_SIZE * ATTENTION_SIZE
}

fn check_attention(t: &[usize], s: &[usize], u: &[usize], v: &[usize]) -> Result<(usize, usize)> {
    match (t, s, u, v) {
        ([k, d], [k2, r], [k3, r2, n], [k4, r3, n2])
            if k == k2 && k == k3 && k == k4 && *r == ATTENTION_RANK && r == r2 && r == r3 && *n == ATTENTION_SIZE && n == n2 =>
        {
            Ok((*k, *d))
        }
        _ => Err(shape_err(
            "factored_attention",
            format!("t {t:?}, s {s:?}, U {u:?}, V {v:?} do not form K×D′, K×4, K×4×14"),
        )),
    }
}

/// `Q_k = U_kᵀ diag(s_k) V_k`, stacked `K×14×14`.
pub fn attention_maps_var<'t>(s: Var<'t>, basis: &AttentionBasis<Var<'t>>) -> Result<Var<'t>> {
    let ss = s.shape();
    let k = ss[0];
    let (r, n) = (ATTENTION_RANK, ATTENTION_SIZE);
    let maps = (0..k)
        .map(|i| {
            let u = basis.u.slice(0, i, i + 1)?.reshape(&[r, n])?;
            let v = basis.v.slice(0, i, i + 1)?.reshape(&[r, n])?;
            let sk = s.slice(0, i, i + 1)?.reshape(&[r, 1])?;
            u.transpose()?.matmul(v.mul(sk)?)?.reshape(&[1, n, n])
        })
        .collect::<Result<Vec<_>>>()?;
    s.tape().concat(&maps, 0)
}

/// Mask logits `Σ_k (t ∗ R)_k ⊙ up4(Q_k)` for a `D′×56×56` crop.
pub fn factored_attention_mask_var<'t>(
    roi: Var<'t>,
    e: &SegEmbedding<Var<'t>>,
    basis: &AttentionBasis<Var<'t>>,
) -> Result<Var<'t>> {
    let (k, d) = check_attention(&e.t.shape(), &e.s.shape(), &basis.u.shape(), &basis.v.shape())?;
    let rs = roi.shape();
    let side = ATTENTION_SIZE * 4;
    if rs != [d, side, side] {
        return Err(shape_err(
            "factored_attention",
            format!("crop {rs:?} must be {d}×{side}×{side}"),
        ));
    }
    let projected = e.t.matmul(roi.reshape(&[d, side * side])?)?;
    let q = attention_maps_var(e.s, basis)?.upsample_aligned(4)?.reshape(&[k, side * side])?;
    projected.mul(q)?.sum_axis(0)?.reshape(&[side, side])
}

pub fn factored_attention_mask(roi: &Tensor, e: &SegEmbedding, basis: &AttentionBasis) -> Result<Tensor> {
    let tape = Tape::new();
    let out = factored_attention_mask_var(tape.constant(roi.clone()), &e.constants(&tape), &basis.constants(&tape))?;
    Ok(out.tensor())
}

pub fn attention_maps(e: &SegEmbedding, basis: &AttentionBasis) -> Result<Tensor> {
    check_attention(e.t.shape(), e.s.shape(), basis.u.shape(), basis.v.shape())?;
    let tape = Tape::new();
    Ok(attention_maps_var(tape.constant(e.s.clone()), &basis.constants(&tape))?.tensor())
}

/// Mean binary cross-entropy of logits against `{0, 1}` targets.
pub fn bce_with_logits_var<'t>(logits: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if logits.shape() != target.shape() {
        return Err(shape_err(
            "bce_with_logits",
            format!("logits {:?} vs target {:?}", logits.shape(), target.shape()),
        ));
    }
    let y = logits.tape().constant(target.clone());
    Ok(logits.softplus().sub(logits.mul(y)?)?.mean())
}

/// Arithmetic mean of an instance's proposal embeddings; `None` when the
/// instance has no proposals.
pub fn aggregate_instance_embeddings(embeddings: &[Vec<f64>]) -> Option<Vec<f64>> {
    let first = embeddings.first()?;
    let n = embeddings.len() as f64;
    let mut mean = vec![0.0; first.len()];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    Some(mean)
}

pub fn aggregate_instance_embeddings_var<'t>(embeddings: &[Var<'t>]) -> Option<Result<Var<'t>>> {
    let first = embeddings.first()?;
    let n = embeddings.len() as f64;
    Some((|| {
        let mut acc = *first;
        for e in &embeddings[1..] {
            acc = acc.add(*e)?;
        }
        Ok(acc.scale(1.0 / n))
    })())
}

/// `W_pano = [W_stuff, W_thing]`, both with `D′` rows.
#[derive(Clone, Debug)]
pub struct PanopticWeights<T = Tensor> {
    pub stuff: T,
    pub thing: Option<T>,
}

/// `Y = W_panoᵀ F`, shaped `(C_stuff + C_thing)×H×W`.
pub fn panoptic_logits_var<'t>(f: Var<'t>, w: &PanopticWeights<Var<'t>>) -> Result<Var<'t>> {
    let fs = f.shape();
    let [d, h, wd] = fs[..] else {
        return Err(shape_err("panoptic_logits", format!("F must be D′×H×W, got {fs:?}")));
    };
    let mut cols = vec![w.stuff];
    cols.extend(w.thing);
    for c in &cols {
        let cs = c.shape();
        if cs.len() != 2 || cs[0] != d {
            return Err(shape_err(
                "panoptic_logits",
                format!("weight {cs:?} must have D′ = {d} rows"),
            ));
        }
    }
    let wp = f.tape().concat(&cols, 1)?;
    let n = wp.shape()[1];
    wp.transpose()?.matmul(f.reshape(&[d, h * wd])?)?.reshape(&[n, h, wd])
}

pub fn panoptic_logits(f: &Tensor, w: &PanopticWeights) -> Result<Tensor> {
    let tape = Tape::new();
    let wv = PanopticWeights {
        stuff: tape.constant(w.stuff.clone()),
        thing: w.thing.as_ref().map(|t| tape.constant(t.clone())),
    };
    Ok(panoptic_logits_var(tape.constant(f.clone()), &wv)?.tensor())
}

/// Mean per-pixel cross-entropy; `None` targets are ignored.
pub fn pixel_cross_entropy_var<'t>(logits: Var<'t>, targets: &[Option<usize>]) -> Result<Var<'t>> {
    let s = logits.shape();
    let [n, h, w] = s[..] else {
        return Err(shape_err("pixel_cross_entropy", format!("logits must be N×H×W, got {s:?}")));
    };
    let hw = h * w;
    if targets.len() != hw {
        return Err(shape_err(
            "pixel_cross_entropy",
            format!("{} targets for {hw} pixels", targets.len()),
        ));
    }
    let mut idx = Vec::new();
    for (p, t) in targets.iter().enumerate() {
        if let Some(c) = *t {
            if c >= n {
                return Err(arg_err("pixel_cross_entropy", format!("class {c} of {n}")));
            }
            idx.push(c * hw + p);
        }
    }
    if idx.is_empty() {
        return Ok(logits.tape().constant(Tensor::scalar(0.0)));
    }
    let k = idx.len();
    let lp = logits.reshape(&[n, hw])?.log_softmax(0)?;
    Ok(lp.gather(idx, &[k])?.mean().neg())
}

pub fn pixel_cross_entropy(logits: &Tensor, targets: &[Option<usize>]) -> Result<f64> {
    let tape = Tape::new();
    pixel_cross_entropy_var(tape.constant(logits.clone()), targets)?.item()
}

/// Maps raw 3D channels to physical quantities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    /// Pixels per unit of the raw center offsets (the proposal's stride).
    pub offset_scale: f64,
    pub depth_prior: f64,
    pub depth_scale: f64,
    /// Added to the raw cosine so a zero embedding decodes to `α = 0`.
    pub cos_prior: f64,
}

/// The 3D block of an instance embedding, in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding3D {
    /// Projected-center offsets from the proposal location, pixels.
    pub c_x: f64,
    pub c_y: f64,
    /// Instance depth before the crop correction, meters.
    pub z_inst: f64,
    /// Raw `(h, w, l)`; the decoded extents are `exp` of these.
    pub log_dims: [f64; 3],
    pub sin_a: f64,
    pub cos_a: f64,
    pub attr_logits: Vec<f64>,
}

impl Embedding3D {
    pub fn from_raw(raw: &[f64], p: &DecodeParams) -> Result<Self> {
        if raw.len() < E3D_FIXED {
            return Err(shape_err("Embedding3D", format!("{} raw values, need {E3D_FIXED}", raw.len())));
        }
        Ok(Self {
            c_x: p.offset_scale * raw[0],
            c_y: p.offset_scale * raw[1],
            z_inst: p.depth_prior + p.depth_scale * raw[2],
            log_dims: [raw[3], raw[4], raw[5]],
            sin_a: raw[6],
            cos_a: p.cos_prior + raw[7],
            attr_logits: raw[E3D_FIXED..].to_vec(),
        })
    }
}

/// A decoded prediction, with orientation kept as the observation angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pred3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub alpha: f64,
}

impl Pred3D {
    pub fn to_box(&self) -> Result<Box3D> {
        Box3D::new(self.center, self.dims, alpha_to_yaw(self.alpha, self.center))
    }
}

/// `z = z_inst + GAP(R)ᵀ w_z`, center backprojected from the offset
/// location, extents `exp(log_dims)`, `α = atan2` of the normalized pair.
pub fn decode_pred3d(
    e: &Embedding3D,
    location_px: (f64, f64),
    k: &CameraIntrinsics,
    roi: &Tensor,
    w_z: &Tensor,
) -> Result<Pred3D> {
    k.validate()?;
    let (d, h, w) = roi.dims3()?;
    if w_z.len() != d {
        return Err(shape_err("decode_3d", format!("w_z has {} entries, crop {d} channels", w_z.len())));
    }
    let n = (h * w) as f64;
    let correction: f64 = (0..d)
        .map(|c| roi.data()[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / n * w_z.data()[c])
        .sum();
    let z = e.z_inst + correction;
    if !(z > 0.0) {
        return Err(arg_err("decode_3d", format!("decoded depth {z} is not positive")));
    }
    let center = backproject(k, (location_px.0 + e.c_x, location_px.1 + e.c_y), z)?;
    let norm = e.sin_a.hypot(e.cos_a);
    if !(norm > 0.0) {
        return Err(arg_err("decode_3d", "orientation pair is zero"));
    }
    Ok(Pred3D {
        center,
        dims: e.log_dims.map(f64::exp),
        alpha: (e.sin_a / norm).atan2(e.cos_a / norm),
    })
}

pub fn decode_3d(
    e: &Embedding3D,
    location_px: (f64, f64),
    k: &CameraIntrinsics,
    roi: &Tensor,
    w_z: &Tensor,
) -> Result<Box3D> {
    decode_pred3d(e, location_px, k, roi, w_z)?.to_box()
}

/// The three disentangled corner terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CornerTerms {
    pub loc: f64,
    pub dim: f64,
    pub ori: f64,
}

fn corners_l1(a: &[[f64; 3]; 8], b: &[[f64; 3]; 8]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / 24.0
}

/// Mean L1 over the 24 corner coordinates, once per parameter group.
///
/// Each term swaps one group of `gt` for the prediction: `loc` the center,
/// `dim` the extents, `ori` the observation angle (converted to yaw with the
/// ground-truth center on both sides).
pub fn corner_terms(pred: &Pred3D, gt: &Box3D) -> CornerTerms {
    let reference = box_corners(gt);
    let with = |center, dims, yaw| {
        box_corners(&Box3D {
            center,
            dims,
            yaw,
            attribute: None,
        })
    };
    let gt_alpha = yaw_to_alpha(gt.yaw, gt.center);
    CornerTerms {
        loc: corners_l1(&with(pred.center, gt.dims, gt.yaw), &reference),
        dim: corners_l1(&with(gt.center, pred.dims, gt.yaw), &reference),
        ori: corners_l1(
            &with(gt.center, gt.dims, alpha_to_yaw(pred.alpha, gt.center)),
            &with(gt.center, gt.dims, alpha_to_yaw(gt_alpha, gt.center)),
        ),
    }
}

/// Cross-entropy of attribute logits; zero when there are no attributes.
pub fn attribute_loss(logits: &[f64], target: Option<usize>) -> Result<f64> {
    match target {
        Some(t) if t < logits.len() => {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            Ok(lse - logits[t])
        }
        Some(t) => Err(arg_err("attribute_loss", format!("attribute {t} of {}", logits.len()))),
        None => Ok(0.0),
    }
}

/// `L_attr + loc + dim + ori`.
pub fn corner_loss(pred: &Pred3D, attr_logits: &[f64], gt: &Box3D) -> Result<f64> {
    let t = corner_terms(pred, gt);
    Ok(attribute_loss(attr_logits, gt.attribute)? + t.loc + t.dim + t.ori)
}

/// Differentiable decode of one proposal.
pub struct Pred3DVar<'t> {
    /// `(x, y, z)`.
    pub center: Var<'t>,
    /// `(h, w, l)`.
    pub dims: Var<'t>,
    /// Unit `(sin α, cos α)`.
    pub orientation: Var<'t>,
    /// Raw center offsets in stride units.
    pub offsets: Var<'t>,
    pub attr_logits: Option<Var<'t>>,
}

impl Pred3DVar<'_> {
    pub fn value(&self) -> Pred3D {
        let c = self.center.tensor();
        let d = self.dims.tensor();
        let o = self.orientation.tensor();
        Pred3D {
            center: [c.data()[0], c.data()[1], c.data()[2]],
            dims: [d.data()[0], d.data()[1], d.data()[2]],
            alpha: o.data()[0].atan2(o.data()[1]),
        }
    }
}

pub fn decode_3d_var<'t>(
    raw: Var<'t>,
    location_px: (f64, f64),
    k: &CameraIntrinsics,
    roi: Var<'t>,
    w_z: Var<'t>,
    p: &DecodeParams,
) -> Result<Pred3DVar<'t>> {
    let n = raw.shape().iter().product::<usize>();
    if raw.shape().len() != 1 || n < E3D_FIXED {
        return Err(shape_err("decode_3d", format!("raw 3D block {:?}", raw.shape())));
    }
    let d = roi.shape()[0];
    if w_z.shape() != [d] {
        return Err(shape_err("decode_3d", format!("w_z {:?} vs crop width {d}", w_z.shape())));
    }
    let tape = raw.tape();
    let pooled = roi.gap()?.reshape(&[1, d])?;
    let correction = pooled.matmul(w_z.reshape(&[d, 1])?)?.reshape(&[1])?;
    let z = raw.slice(0, 2, 3)?.scale(p.depth_scale).add_scalar(p.depth_prior).add(correction)?;
    let offsets = raw.slice(0, 0, 2)?;
    let uv = offsets
        .scale(p.offset_scale)
        .add(tape.constant(Tensor::from_vec(vec![location_px.0 - k.u0, location_px.1 - k.v0])))?;
    let inv_f = tape.constant(Tensor::from_vec(vec![1.0 / k.fx, 1.0 / k.fy]));
    let xy = uv.mul(inv_f)?.mul(z)?;
    let center = tape.concat(&[xy, z], 0)?;
    let dims = raw.slice(0, 3, 6)?.exp();
    let sc = raw
        .slice(0, 6, 8)?
        .add(tape.constant(Tensor::from_vec(vec![0.0, p.cos_prior])))?;
    let norm = sc.square().sum().add_scalar(1e-12).sqrt();
    let orientation = sc.div(norm)?;
    let attr_logits = if n > E3D_FIXED {
        Some(raw.slice(0, E3D_FIXED, n)?)
    } else {
        None
    };
    Ok(Pred3DVar {
        center,
        dims,
        orientation,
        offsets,
        attr_logits,
    })
}

fn corner_sign_columns(tape: &Tape) -> [Var<'_>; 3] {
    let col = |i: usize| tape.constant(Tensor::from_vec(CORNER_SIGNS.iter().map(|s| s[i]).collect()));
    [col(0), col(1), col(2)]
}

/// Corners as three length-8 coordinate vectors. `center` and `dims` are
/// length-3 vars; `cs` is `(cos yaw, sin yaw)` as scalar vars.
fn corners_var<'t>(center: Var<'t>, dims: Var<'t>, cos: Var<'t>, sin: Var<'t>) -> Result<[Var<'t>; 3]> {
    let tape = center.tape();
    let [sl, sh, sw] = corner_sign_columns(tape);
    let dl = sl.mul(dims.slice(0, 2, 3)?)?;
    let dh = sh.mul(dims.slice(0, 0, 1)?)?;
    let dw = sw.mul(dims.slice(0, 1, 2)?)?;
    let x = dl.mul(cos)?.add(dw.mul(sin)?)?.add(center.slice(0, 0, 1)?)?;
    let y = dh.add(center.slice(0, 1, 2)?)?;
    let z = dw.mul(cos)?.sub(dl.mul(sin)?)?.add(center.slice(0, 2, 3)?)?;
    Ok([x, y, z])
}

fn corners_l1_var<'t>(pred: [Var<'t>; 3], gt: &[[f64; 3]; 8]) -> Result<Var<'t>> {
    let tape = pred[0].tape();
    let mut total: Option<Var<'t>> = None;
    for (axis, p) in pred.into_iter().enumerate() {
        let g = tape.constant(Tensor::from_vec(gt.iter().map(|c| c[axis]).collect()));
        let term = p.sub(g)?.abs().sum();
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("three axes").scale(1.0 / 24.0))
}

/// Differentiable [`corner_terms`]; `loc` is `None` when the decoded depth
/// is not positive.
pub struct CornerTermsVar<'t> {
    pub loc: Option<Var<'t>>,
    pub dim: Var<'t>,
    pub ori: Var<'t>,
}

pub fn corner_terms_var<'t>(pred: &Pred3DVar<'t>, gt: &Box3D) -> Result<CornerTermsVar<'t>> {
    let tape = pred.center.tape();
    let reference = box_corners(gt);
    let scalar = |v: f64| tape.constant(Tensor::scalar(v));
    let (gs, gc) = gt.yaw.sin_cos();
    let gt_center = tape.constant(Tensor::from_vec(gt.center.to_vec()));
    let gt_dims = tape.constant(Tensor::from_vec(gt.dims.to_vec()));
    let loc = if pred.center.value().data()[2] > 0.0 {
        Some(corners_l1_var(
            corners_var(pred.center, gt_dims, scalar(gc), scalar(gs))?,
            &reference,
        )?)
    } else {
        None
    };
    let dim = corners_l1_var(corners_var(gt_center, pred.dims, scalar(gc), scalar(gs))?, &reference)?;
    let phi = gt.center[0].atan2(gt.center[2]);
    let (ps, pc) = phi.sin_cos();
    let sa = pred.orientation.slice(0, 0, 1)?;
    let ca = pred.orientation.slice(0, 1, 2)?;
    let cos = ca.scale(pc).sub(sa.scale(ps))?;
    let sin = sa.scale(pc).add(ca.scale(ps))?;
    let gt_yaw = alpha_to_yaw(yaw_to_alpha(gt.yaw, gt.center), gt.center);
    let ori_ref = box_corners(&Box3D {
        yaw: gt_yaw,
        ..*gt
    });
    let ori = corners_l1_var(corners_var(gt_center, gt_dims, cos, sin)?, &ori_ref)?;
    Ok(CornerTermsVar { loc, dim, ori })
}

/// L1 between predicted raw offsets and the ground-truth projected center
/// expressed in the same units.
pub fn center_offset_loss_var<'t>(
    pred: &Pred3DVar<'t>,
    location_px: (f64, f64),
    gt_center_px: (f64, f64),
    p: &DecodeParams,
) -> Result<Var<'t>> {
    let tape = pred.offsets.tape();
    let target = tape.constant(Tensor::from_vec(vec![
        (gt_center_px.0 - location_px.0) / p.offset_scale,
        (gt_center_px.1 - location_px.1) / p.offset_scale,
    ]));
    Ok(pred.offsets.sub(target)?.abs().mean())
}

pub fn attribute_loss_var<'t>(logits: Var<'t>, target: usize) -> Result<Var<'t>> {
    let n = logits.shape()[0];
    if target >= n {
        return Err(arg_err("attribute_loss", format!("attribute {target} of {n}")));
    }
    Ok(logits.log_softmax(0)?.slice(0, target, target + 1)?.sum().neg())
}

/// Three `conv3×3 → up2` stages, ReLU after the first two convolutions.
#[derive(Clone, Debug)]
pub struct DepthHeadParams<T = Tensor> {
    pub convs: Vec<Conv<T>>,
}

impl<T> DepthHeadParams<T> {
    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> DepthHeadParams<U> {
        DepthHeadParams {
            convs: self.convs.iter().map(|c| c.map(&f)).collect(),
        }
    }
}

impl DepthHeadParams<ParamId> {
    /// Widths `D′ → D′/2 → D′/4 → 1`; the last bias starts at `prior`.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, dense_width: usize, prior: f64) -> Self {
        let w1 = (dense_width / 2).max(1);
        let w2 = (dense_width / 4).max(1);
        let convs = vec![
            Conv::init(store, rng, "depth.conv0", w1, dense_width, 3, Some(0.0)),
            Conv::init(store, rng, "depth.conv1", w2, w1, 3, Some(0.0)),
            Conv::init(store, rng, "depth.conv2", 1, w2, 3, Some(prior)),
        ];
        Self { convs }
    }

    pub fn bind<'t>(&self, b: &Bound<'t>) -> DepthHeadParams<Var<'t>> {
        self.map(|&id| b[id])
    }
}

impl DepthHeadParams<Tensor> {
    pub fn constants<'t>(&self, tape: &'t Tape) -> DepthHeadParams<Var<'t>> {
        self.map(|t| tape.constant(t.clone()))
    }
}

/// Depth at 8× the resolution of `F`, clamped to `[MIN_DEPTH, MAX_DEPTH]`.
pub fn depth_head_var<'t>(f: Var<'t>, params: &DepthHeadParams<Var<'t>>) -> Result<Var<'t>> {
    if params.convs.len() != 3 {
        return Err(arg_err("depth_head", "expects three convolutions"));
    }
    let mut x = f;
    for (i, conv) in params.convs.iter().enumerate() {
        x = conv.forward(x, 1)?;
        if i < 2 {
            x = x.relu();
        }
        x = x.upsample_aligned(2)?;
    }
    Ok(x.clamp(MIN_DEPTH, MAX_DEPTH))
}

pub fn depth_head(f: &Tensor, params: &DepthHeadParams) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(depth_head_var(tape.constant(f.clone()), &params.constants(&tape))?.tensor())
}

/// Mean `|pred − gt|` over pixels where `valid` is set.
pub fn depth_l1_var<'t>(pred: Var<'t>, gt: &Tensor, valid: &[bool]) -> Result<Var<'t>> {
    let n: usize = pred.shape().iter().product();
    if gt.len() != n || valid.len() != n {
        return Err(shape_err(
            "depth_l1",
            format!("prediction {:?}, gt {:?}, mask {}", pred.shape(), gt.shape(), valid.len()),
        ));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return Ok(pred.tape().constant(Tensor::scalar(0.0)));
    }
    let k = idx.len();
    let target = Tensor::from_vec(idx.iter().map(|&i| gt.data()[i]).collect());
    let picked = pred.reshape(&[n])?.gather(idx, &[k])?;
    Ok(picked.sub(pred.tape().constant(target))?.abs().mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_3d: f64,
    /// Weight of the dimension term inside the 3D bracket.
    pub alpha: f64,
    /// Weight of the location term inside the 3D bracket.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_3d: 0.4,
            alpha: 2.0,
            beta: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents<T = f64> {
    pub fcos: T,
    pub ctr: T,
    pub dim: T,
    pub ori: T,
    pub loc: T,
    pub attr: T,
    pub mask: T,
    pub pano: T,
    pub depth: T,
}

impl<T> LossComponents<T> {
    pub fn named(&self) -> [(&'static str, &T); 9] {
        [
            ("fcos", &self.fcos),
            ("ctr", &self.ctr),
            ("dim", &self.dim),
            ("ori", &self.ori),
            ("loc", &self.loc),
            ("attr", &self.attr),
            ("mask", &self.mask),
            ("pano", &self.pano),
            ("depth", &self.depth),
        ]
    }
}

impl LossWeights {
    /// Coefficient of each component, in [`LossComponents::named`] order.
    pub fn coefficients(&self) -> [f64; 9] {
        let l = self.lambda_3d;
        [1.0, l, l * self.alpha, l, l * self.beta, l, 1.0, 1.0, 1.0]
    }
}

/// `fcos + λ(ctr + α·dim + ori + β·loc + attr) + mask + pano + depth`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for ((name, v), k) in c.named().into_iter().zip(w.coefficients()) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} is {v}")));
        }
        total += k * v;
    }
    Ok(total)
}

/// Differentiable [`total_loss`]; absent components count as zero.
pub fn total_loss_var<'t>(tape: &'t Tape, c: &LossComponents<Option<Var<'t>>>, w: &LossWeights) -> Result<Var<'t>> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for ((name, v), k) in c.named().into_iter().zip(w.coefficients()) {
        if let Some(v) = v {
            let x = v.item()?;
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("loss component {name} is {x}")));
            }
            total = total.add(v.reshape(&[1])?.scale(k))?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::oracles;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basis(rng: &mut ChaCha8Rng, k: usize) -> AttentionBasis {
        AttentionBasis {
            u: Tensor::rand_uniform(rng, &[k, 4, 14], -1.0, 1.0),
            v: Tensor::rand_uniform(rng, &[k, 4, 14], -1.0, 1.0),
        }
    }

    fn seg(rng: &mut ChaCha8Rng, k: usize, d: usize) -> SegEmbedding {
        SegEmbedding {
            t: Tensor::rand_uniform(rng, &[k, d], -1.0, 1.0),
            s: Tensor::rand_uniform(rng, &[k, 4], -1.0, 1.0),
        }
    }

    #[test]
    fn layout_widths() {
        let l = EmbeddingLayout::new(64, 4, 0);
        assert_eq!(l.factors().len(), 16);
        assert_eq!(l.width(), 64 + 256 + 16 + 8);
        assert_eq!(EmbeddingLayout::new(16, 4, 3).e3d().len(), 11);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(factored_attention_params(4), 16);
        assert_eq!(full_attention_params(4), 784);
    }

    #[test]
    fn zero_factors_give_zero_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = basis(&mut rng, 4);
        let mut e = seg(&mut rng, 4, 3);
        e.s = Tensor::zeros(&[4, 4]);
        let r = Tensor::rand_uniform(&mut rng, &[3, 56, 56], -1.0, 1.0);
        let m = factored_attention_mask(&r, &e, &b).unwrap();
        assert_eq!(m.shape(), &[56, 56]);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_factor_selects_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = basis(&mut rng, 4);
        let mut e = seg(&mut rng, 4, 3);
        let (k, d) = (2, 3);
        e.s = Tensor::from_fn(&[4, 4], |i| if i == k * 4 + d { 1.0 } else { 0.0 });
        let q = attention_maps(&e, &b).unwrap();
        for p in 0..14 {
            for r in 0..14 {
                let want = b.u.data()[(k * 4 + d) * 14 + p] * b.v.data()[(k * 4 + d) * 14 + r];
                assert!((q.at3(k, p, r) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn factored_matches_materialized() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = basis(&mut rng, 4);
            let e = seg(&mut rng, 4, 5);
            let r = Tensor::rand_uniform(&mut rng, &[5, 56, 56], -1.0, 1.0);
            let got = factored_attention_mask(&r, &e, &b).unwrap();
            let want = oracles::materialized_attention_mask(&r, &e, &b);
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = basis(&mut rng, 4);
        let e = seg(&mut rng, 4, 5);
        assert!(factored_attention_mask(&Tensor::zeros(&[4, 56, 56]), &e, &b).is_err());
        assert!(factored_attention_mask(&Tensor::zeros(&[5, 28, 28]), &e, &b).is_err());
    }

    #[test]
    fn mean_embeddings() {
        assert_eq!(aggregate_instance_embeddings(&[vec![1.0, 2.0]]), Some(vec![1.0, 2.0]));
        assert_eq!(
            aggregate_instance_embeddings(&[vec![1.5, -2.0], vec![-1.5, 2.0]]),
            Some(vec![0.0, 0.0])
        );
        assert_eq!(aggregate_instance_embeddings(&[]), None);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let es: Vec<Vec<f64>> = (0..5)
            .map(|_| Tensor::rand_uniform(&mut rng, &[7], -1.0, 1.0).into_data())
            .collect();
        let got = aggregate_instance_embeddings(&es).unwrap();
        for j in 0..7 {
            let mut s = 0.0;
            for e in &es {
                s += e[j];
            }
            assert!((got[j] - s / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_panoptic_weights_give_log_n_entropy() {
        let f = Tensor::ones(&[4, 3, 5]);
        let w = PanopticWeights {
            stuff: Tensor::zeros(&[4, 2]),
            thing: Some(Tensor::zeros(&[4, 3])),
        };
        let y = panoptic_logits(&f, &w).unwrap();
        let targets: Vec<Option<usize>> = (0..15).map(|p| Some(p % 5)).collect();
        let ce = pixel_cross_entropy(&y, &targets).unwrap();
        assert!((ce - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_stuff_column_selects_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Tensor::rand_uniform(&mut rng, &[4, 3, 5], -1.0, 1.0);
        let w = PanopticWeights {
            stuff: Tensor::from_fn(&[4, 1], |i| if i == 2 { 1.0 } else { 0.0 }),
            thing: None,
        };
        let y = panoptic_logits(&f, &w).unwrap();
        assert_eq!(y.data(), &f.data()[30..45]);
    }

    #[test]
    fn panoptic_matches_matmul_oracle_and_permutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = Tensor::rand_uniform(&mut rng, &[4, 3, 5], -1.0, 1.0);
        let w = PanopticWeights {
            stuff: Tensor::rand_uniform(&mut rng, &[4, 2], -1.0, 1.0),
            thing: Some(Tensor::rand_uniform(&mut rng, &[4, 3], -1.0, 1.0)),
        };
        let y = panoptic_logits(&f, &w).unwrap();
        assert!(y.max_abs_diff(&oracles::panoptic_logits(&f, &w)) < 1e-12);
        let thing = w.thing.as_ref().unwrap();
        let perm = [2, 0, 1];
        let permuted = Tensor::from_fn(&[4, 3], |i| thing.at2(i / 3, perm[i % 3]));
        let yp = panoptic_logits(
            &f,
            &PanopticWeights {
                stuff: w.stuff.clone(),
                thing: Some(permuted),
            },
        )
        .unwrap();
        for (c, &src) in perm.iter().enumerate() {
            assert_eq!(&yp.data()[(2 + c) * 15..(3 + c) * 15], &y.data()[(2 + src) * 15..(3 + src) * 15]);
        }
    }

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(180.0, 170.0, 128.0, 64.0).unwrap()
    }

    fn decode_params() -> DecodeParams {
        DecodeParams {
            offset_scale: 8.0,
            depth_prior: 20.0,
            depth_scale: 10.0,
            cos_prior: 0.0,
        }
    }

    #[test]
    fn decode_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = [0.3, -0.2, 0.1, 0.2, -0.1, 0.5, 0.0, 1.0];
        let e = Embedding3D::from_raw(&raw, &decode_params()).unwrap();
        let roi = Tensor::rand_uniform(&mut rng, &[4, 56, 56], -1.0, 1.0);
        let p = decode_pred3d(&e, (40.0, 80.0), &camera(), &roi, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(p.center[2], e.z_inst);
        assert_eq!(p.alpha, 0.0);
        let bad = Embedding3D {
            z_inst: -1.0,
            ..e.clone()
        };
        assert!(decode_pred3d(&bad, (40.0, 80.0), &camera(), &roi, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn decode_matches_step_oracle_and_var_path() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = Tensor::rand_uniform(&mut rng, &[10], -0.5, 0.5);
            let roi = Tensor::rand_uniform(&mut rng, &[4, 56, 56], -1.0, 1.0);
            let wz = Tensor::rand_uniform(&mut rng, &[4], -1.0, 1.0);
            let e = Embedding3D::from_raw(raw.data(), &decode_params()).unwrap();
            let b = decode_3d(&e, (64.0, 72.0), &camera(), &roi, &wz).unwrap();
            let want = oracles::decode_steps(raw.data(), (64.0, 72.0), &camera(), &roi, &wz, &decode_params());
            for i in 0..3 {
                assert!((b.center[i] - want.center[i]).abs() < 1e-10);
                assert!((b.dims[i] - want.dims[i]).abs() < 1e-10);
            }
            assert!((b.yaw - want.yaw).abs() < 1e-10);
            let tape = Tape::new();
            let pv = decode_3d_var(
                tape.constant(raw.clone()),
                (64.0, 72.0),
                &camera(),
                tape.constant(roi.clone()),
                tape.constant(wz.clone()),
                &decode_params(),
            )
            .unwrap()
            .value();
            let pe = decode_pred3d(&e, (64.0, 72.0), &camera(), &roi, &wz).unwrap();
            for i in 0..3 {
                assert!((pv.center[i] - pe.center[i]).abs() < 1e-10);
                assert!((pv.dims[i] - pe.dims[i]).abs() < 1e-12);
            }
            assert!((pv.alpha - pe.alpha).abs() < 1e-12);
        }
    }

    fn gt_box() -> Box3D {
        Box3D {
            center: [1.5, 0.8, 14.0],
            dims: [1.5, 1.7, 4.1],
            yaw: 0.4,
            attribute: Some(1),
        }
    }

    fn exact_pred(gt: &Box3D) -> Pred3D {
        Pred3D {
            center: gt.center,
            dims: gt.dims,
            alpha: yaw_to_alpha(gt.yaw, gt.center),
        }
    }

    #[test]
    fn exact_prediction_has_zero_corner_terms() {
        let gt = gt_box();
        assert_eq!(corner_terms(&exact_pred(&gt), &gt), CornerTerms::default());
    }

    #[test]
    fn disentangled_groups() {
        let gt = gt_box();
        let mut p = exact_pred(&gt);
        p.dims[2] += 0.3;
        let t = corner_terms(&p, &gt);
        assert!(t.dim > 0.0 && t.loc == 0.0 && t.ori == 0.0);
        let mut p = exact_pred(&gt);
        p.center[0] += 0.3;
        let t = corner_terms(&p, &gt);
        assert!(t.loc > 0.0 && t.dim == 0.0 && t.ori == 0.0);
        let mut p = exact_pred(&gt);
        p.alpha += 0.3;
        let t = corner_terms(&p, &gt);
        assert!(t.ori > 0.0 && t.dim == 0.0 && t.loc == 0.0);
    }

    #[test]
    fn corner_terms_match_enumeration_and_var_path() {
        use rand::Rng;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = gt_box();
            let p = Pred3D {
                center: [gt.center[0] + rng.gen_range(-1.0..1.0), gt.center[1], gt.center[2] + rng.gen_range(-2.0..2.0)],
                dims: gt.dims.map(|d| d * rng.gen_range(0.7..1.3)),
                alpha: rng.gen_range(-3.0..3.0),
            };
            let got = corner_terms(&p, &gt);
            let want = oracles::corner_terms(&p, &gt);
            assert!((got.loc - want.loc).abs() < 1e-10);
            assert!((got.dim - want.dim).abs() < 1e-10);
            assert!((got.ori - want.ori).abs() < 1e-10);
            let tape = Tape::new();
            let pv = Pred3DVar {
                center: tape.constant(Tensor::from_vec(p.center.to_vec())),
                dims: tape.constant(Tensor::from_vec(p.dims.to_vec())),
                orientation: tape.constant(Tensor::from_vec(vec![p.alpha.sin(), p.alpha.cos()])),
                offsets: tape.constant(Tensor::zeros(&[2])),
                attr_logits: None,
            };
            let tv = corner_terms_var(&pv, &gt).unwrap();
            assert!((tv.loc.unwrap().item().unwrap() - got.loc).abs() < 1e-10);
            assert!((tv.dim.item().unwrap() - got.dim).abs() < 1e-10);
            assert!((tv.ori.item().unwrap() - got.ori).abs() < 1e-10);
        }
    }

    #[test]
    fn attribute_cross_entropy() {
        let l = attribute_loss(&[0.0, 0.0], Some(1)).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(attribute_loss(&[], None).unwrap(), 0.0);
        assert!(attribute_loss(&[1.0], Some(3)).is_err());
        let gt = gt_box();
        let c = corner_loss(&exact_pred(&gt), &[0.0, 0.0], &gt).unwrap();
        assert!((c - 2f64.ln()).abs() < 1e-15);
    }

    fn depth_params(rng: &mut ChaCha8Rng, d: usize) -> DepthHeadParams {
        let mut store = ParamStore::new();
        let ids = DepthHeadParams::init(&mut store, rng, d, 10.0);
        ids.map(|&id| store.get(id).clone())
    }

    #[test]
    fn zero_depth_weights_give_clamped_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = depth_params(&mut rng, 8);
        for c in &mut p.convs {
            c.weight = Tensor::zeros(c.weight.shape());
        }
        let f = Tensor::rand_uniform(&mut rng, &[8, 4, 5], -1.0, 1.0);
        let d = depth_head(&f, &p).unwrap();
        assert!(d.data().iter().all(|&v| v == 10.0));
        p.convs[2].bias = Some(Tensor::full(&[1], 500.0));
        assert!(depth_head(&f, &p).unwrap().data().iter().all(|&v| v == MAX_DEPTH));
    }

    #[test]
    fn depth_head_shape_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = depth_params(&mut rng, 8);
        let f = Tensor::rand_uniform(&mut rng, &[8, 32, 64], -1.0, 1.0);
        let d = depth_head(&f, &p).unwrap();
        assert_eq!(d.shape(), &[1, 256, 512]);
        let small = Tensor::rand_uniform(&mut rng, &[8, 3, 5], -1.0, 1.0);
        let got = depth_head(&small, &p).unwrap();
        assert!(got.max_abs_diff(&oracles::depth_head(&small, &p)) < 1e-9);
    }

    #[test]
    fn total_loss_weights() {
        assert_eq!(total_loss(&LossComponents::default(), &LossWeights::default()).unwrap(), 0.0);
        let c = LossComponents {
            dim: 1.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&c, &LossWeights::default()).unwrap(), 0.4 * 2.0);
        let c = LossComponents {
            ori: f64::NAN,
            ..Default::default()
        };
        assert!(total_loss(&c, &LossWeights::default()).is_err());
    }

    #[test]
    fn attention_and_heads_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b = basis(&mut rng, 2);
        let e = seg(&mut rng, 2, 3);
        let r = Tensor::rand_uniform(&mut rng, &[3, 56, 56], -1.0, 1.0);
        let target = Tensor::from_fn(&[56, 56], |i| ((i / 56 + i % 56) % 3 == 0) as u8 as f64);
        let rep = grad_check(
            "factored_attention_mask",
            |s| {
                let tape = s.tape();
                let seg = SegEmbedding {
                    t: tape.constant(e.t.clone()),
                    s,
                };
                let m = factored_attention_mask_var(tape.constant(r.clone()), &seg, &b.constants(tape))?;
                bce_with_logits_var(m, &target)
            },
            &e.s,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
