//! Slow reference implementations written independently of the fast
//! paths, used by the test suites and `verify`.
//!
//! Everything here favors direct loops over reuse; nothing calls the
//! GEMM-backed kernels or the tape.

use crate::branches::{level_for_box, Assignment, Box2D, DenseBranchParams, FeaturePyramid, GtInstance, InstanceBranchParams};
use crate::dynamic_ops::Rank1Factors;
use crate::geometry::{alpha_to_yaw, Box3D, CameraIntrinsics};
use crate::metrics::{DetectionResult, GroundTruth3D, PanopticMap, Taxonomy};
use crate::heads::{AttentionBasis, CornerTerms, DecodeParams, DepthHeadParams, PanopticWeights, Pred3D, SegEmbedding};
use crate::numerics::{Conv, Tensor};

/// Direct-loop cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[co, ho, wo]);
    for o in 0..co {
        for r in 0..ho {
            for c in 0..wo {
                let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                for i in 0..ci {
                    for j in 0..kh {
                        for k in 0..kw {
                            let y = (r * stride + j) as isize - pad as isize;
                            let xx = (c * stride + k) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            let wv = w.data()[((o * ci + i) * kh + j) * kw + k];
                            acc += wv * x.at3(i, y as usize, xx as usize);
                        }
                    }
                }
                out.data_mut()[(o * ho + r) * wo + c] = acc;
            }
        }
    }
    out
}

pub fn conv_same(x: &Tensor, conv: &Conv) -> Tensor {
    let k = conv.weight.shape()[2];
    conv2d(x, &conv.weight, conv.bias.as_ref(), 1, (k - 1) / 2)
}

/// Aligned upsampling: output `p` reads source coordinate `p / factor`,
/// holding the last source sample past the edge.
pub fn upsample(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h * factor, w * factor);
    let sample = |ch: usize, y: f64, xx: f64| {
        let y = y.min((h - 1) as f64);
        let xx = xx.min((w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, xx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (y - y0 as f64, xx - x0 as f64);
        (1.0 - ty) * ((1.0 - tx) * x.at3(ch, y0, x0) + tx * x.at3(ch, y0, x1))
            + ty * ((1.0 - tx) * x.at3(ch, y1, x0) + tx * x.at3(ch, y1, x1))
    };
    Tensor::from_fn(&[c, ho, wo], |i| {
        let ch = i / (ho * wo);
        let p = (i / wo) % ho;
        let q = i % wo;
        sample(ch, p as f64 / factor as f64, q as f64 / factor as f64)
    })
}

fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i] * b.data()[i])
}

fn top_left(x: &Tensor, h: usize, w: usize) -> Tensor {
    let c = x.shape()[0];
    Tensor::from_fn(&[c, h, w], |i| x.at3(i / (h * w), (i / w) % h, i % w))
}

/// `(M_l, E_l)` for one level, layer by layer.
pub fn instance_level(p: &Tensor, params: &InstanceBranchParams, embed: usize) -> (Tensor, Tensor) {
    let mut x = p.clone();
    for conv in &params.tower {
        x = conv_same(&x, conv).map(|v| v.max(0.0));
    }
    let top = conv_same(&x, &params.top);
    let (c, h, w) = (top.shape()[0], top.shape()[1], top.shape()[2]);
    let split = c - embed;
    let plane = h * w;
    let m = Tensor::new(vec![split, h, w], top.data()[..split * plane].to_vec()).expect("slice");
    let e = Tensor::new(vec![embed, h, w], top.data()[split * plane..].to_vec()).expect("slice");
    (m, e)
}

/// `F_l = Conv(X ⊙ A_l) ⊙ B_l` with `X = Conv3×3(P_l) + up2(F_{l+1})`,
/// folded from the coarsest level; single task.
pub fn dense_fold(pyr: &FeaturePyramid, factors: &[Rank1Factors], params: &DenseBranchParams) -> Tensor {
    let n = pyr.levels().len();
    let mut above: Option<Tensor> = None;
    for li in (0..n).rev() {
        let reduced = conv_same(&pyr.levels()[li], &params.reduce[li]);
        let x = match &above {
            Some(f) => {
                let up = top_left(&upsample(f, 2), reduced.shape()[1], reduced.shape()[2]);
                Tensor::from_fn(reduced.shape(), |i| reduced.data()[i] + up.data()[i])
            }
            None => reduced,
        };
        let modulated = mul(&x, &factors[li].a);
        let y = conv_same(&modulated, &params.layers[0][li].conv);
        above = Some(mul(&y, &factors[li].b));
    }
    above.expect("nonempty pyramid")
}

/// Applies the assignment rules location by location.
pub fn assign_exhaustive(dims: &[(usize, usize)], min_level: usize, gts: &[GtInstance]) -> Vec<Assignment> {
    let max_level = min_level + dims.len() - 1;
    let mut out = Vec::new();
    for (li, &(h, w)) in dims.iter().enumerate() {
        let level = min_level + li;
        let s = (1usize << level) as f64;
        for i in 0..h {
            for j in 0..w {
                let mut best: Option<usize> = None;
                for (k, gt) in gts.iter().enumerate() {
                    let b: &Box2D = &gt.box2d;
                    if level_for_box(b, min_level, max_level) != level {
                        continue;
                    }
                    let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
                    let inside = (s * j as f64 - cx).abs() <= (b[2] - b[0]) / 4.0
                        && (s * i as f64 - cy).abs() <= (b[3] - b[1]) / 4.0;
                    let ci = ((cy / s).round().max(0.0) as usize).min(h - 1);
                    let cj = ((cx / s).round().max(0.0) as usize).min(w - 1);
                    if !(inside || (i, j) == (ci, cj)) {
                        continue;
                    }
                    let area = (b[2] - b[0]) * (b[3] - b[1]);
                    let better = match best {
                        None => true,
                        Some(p) => {
                            let pb = &gts[p].box2d;
                            area < (pb[2] - pb[0]) * (pb[3] - pb[1])
                        }
                    };
                    if better {
                        best = Some(k);
                    }
                }
                if let Some(instance) = best {
                    out.push(Assignment {
                        level,
                        location: (i, j),
                        instance,
                    });
                }
            }
        }
    }
    out
}

/// The ramp `a·y + b·x + c` on an `h×w` grid, resized to `out×out` by
/// sampling sub-cell centers of the full extent `[0, h−1]×[0, w−1]`.
pub fn ramp_resize(a: f64, b: f64, c: f64, h: usize, w: usize, out: usize) -> Tensor {
    Tensor::from_fn(&[1, out, out], |i| {
        let (p, q) = (i / out, i % out);
        let y = (p as f64 + 0.5) * (h - 1) as f64 / out as f64;
        let x = (q as f64 + 0.5) * (w - 1) as f64 / out as f64;
        a * y + b * x + c
    })
}

/// Mask logits with every `Q_k = U_kᵀ Σ_k V_k` formed explicitly.
pub fn materialized_attention_mask(r: &Tensor, e: &SegEmbedding, basis: &AttentionBasis) -> Tensor {
    let (k, d) = (e.t.shape()[0], e.t.shape()[1]);
    let n = 14;
    let side = 56;
    let mut q = Tensor::zeros(&[k, n, n]);
    for kk in 0..k {
        let mut sigma = [[0.0; 4]; 4];
        for (rr, row) in sigma.iter_mut().enumerate() {
            row[rr] = e.s.at2(kk, rr);
        }
        for p in 0..n {
            for qq in 0..n {
                let mut acc = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        acc += basis.u.at3(kk, a, p) * sigma[a][b] * basis.v.at3(kk, b, qq);
                    }
                }
                q.data_mut()[(kk * n + p) * n + qq] = acc;
            }
        }
    }
    let up = upsample(&q, 4);
    Tensor::from_fn(&[side, side], |i| {
        let (y, x) = (i / side, i % side);
        (0..k)
            .map(|kk| {
                let proj: f64 = (0..d).map(|dd| e.t.at2(kk, dd) * r.at3(dd, y, x)).sum();
                proj * up.at3(kk, y, x)
            })
            .sum()
    })
}

pub fn panoptic_logits(f: &Tensor, w: &PanopticWeights) -> Tensor {
    let (d, h, wd) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for m in std::iter::once(&w.stuff).chain(w.thing.as_ref()) {
        for c in 0..m.shape()[1] {
            cols.push((0..d).map(|r| m.at2(r, c)).collect());
        }
    }
    let n = cols.len();
    Tensor::from_fn(&[n, h, wd], |i| {
        let ch = i / (h * wd);
        let (y, x) = ((i / wd) % h, i % wd);
        (0..d).map(|r| cols[ch][r] * f.at3(r, y, x)).sum()
    })
}

/// Inverse of the homogeneous projection `K [x y z]ᵀ = z [u v 1]ᵀ`.
fn inverse_project(k: &CameraIntrinsics, u: f64, v: f64, z: f64) -> [f64; 3] {
    let m = k.matrix();
    let det = m[0][0] * m[1][1];
    let inv = [
        [m[1][1] / det, 0.0, -m[0][2] * m[1][1] / det],
        [0.0, m[0][0] / det, -m[1][2] * m[0][0] / det],
        [0.0, 0.0, 1.0],
    ];
    let h = [u * z, v * z, z];
    let mut out = [0.0; 3];
    for (r, row) in inv.iter().enumerate() {
        out[r] = row.iter().zip(h).map(|(a, b)| a * b).sum();
    }
    out
}

/// Full decode of a raw 3D block, one step at a time.
pub fn decode_steps(
    raw: &[f64],
    location: (f64, f64),
    k: &CameraIntrinsics,
    roi: &Tensor,
    w_z: &Tensor,
    p: &DecodeParams,
) -> Box3D {
    let u = location.0 + p.offset_scale * raw[0];
    let v = location.1 + p.offset_scale * raw[1];
    let (d, h, w) = (roi.shape()[0], roi.shape()[1], roi.shape()[2]);
    let mut correction = 0.0;
    for c in 0..d {
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                s += roi.at3(c, y, x);
            }
        }
        correction += s / (h * w) as f64 * w_z.data()[c];
    }
    let z = p.depth_prior + p.depth_scale * raw[2] + correction;
    let center = inverse_project(k, u, v, z);
    let dims = [raw[3].exp(), raw[4].exp(), raw[5].exp()];
    let cos = raw[7] + p.cos_prior;
    let norm = (raw[6] * raw[6] + cos * cos).sqrt();
    let alpha = (raw[6] / norm).atan2(cos / norm);
    Box3D {
        center,
        dims,
        yaw: alpha_to_yaw(alpha, center),
        attribute: None,
    }
}

/// Homogeneous projection `(K p) / z`.
pub fn project(k: &CameraIntrinsics, p: [f64; 3]) -> (f64, f64) {
    let m = k.matrix();
    let h: Vec<f64> = m.iter().map(|row| row.iter().zip(p).map(|(a, b)| a * b).sum()).collect();
    (h[0] / h[2], h[1] / h[2])
}

/// Corners as `R_y(yaw) · [±l/2, ±h/2, ±w/2] + center`, enumerated in the
/// documented order: bottom face then top, each front-left, front-right,
/// back-right, back-left.
pub fn corners(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Vec<[f64; 3]> {
    let [h, w, l] = dims;
    let r = [[yaw.cos(), 0.0, yaw.sin()], [0.0, 1.0, 0.0], [-yaw.sin(), 0.0, yaw.cos()]];
    let mut out = Vec::new();
    for vertical in [1.0, -1.0] {
        for (fl, fw) in [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)] {
            let local = [fl * l / 2.0, vertical * h / 2.0, fw * w / 2.0];
            let mut p = [0.0; 3];
            for i in 0..3 {
                p[i] = center[i] + (0..3).map(|j| r[i][j] * local[j]).sum::<f64>();
            }
            out.push(p);
        }
    }
    out
}

fn mean_l1(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let mut s = 0.0;
    for (p, q) in a.iter().zip(b) {
        for i in 0..3 {
            s += (p[i] - q[i]).abs();
        }
    }
    s / (3 * a.len()) as f64
}

pub fn corner_terms(pred: &Pred3D, gt: &Box3D) -> CornerTerms {
    let reference = corners(gt.center, gt.dims, gt.yaw);
    let ray = gt.center[0].atan2(gt.center[2]);
    let gt_alpha = gt.yaw - ray;
    CornerTerms {
        loc: mean_l1(&corners(pred.center, gt.dims, gt.yaw), &reference),
        dim: mean_l1(&corners(gt.center, pred.dims, gt.yaw), &reference),
        ori: mean_l1(
            &corners(gt.center, gt.dims, pred.alpha + ray),
            &corners(gt.center, gt.dims, gt_alpha + ray),
        ),
    }
}

pub fn depth_head(f: &Tensor, params: &DepthHeadParams) -> Tensor {
    let mut x = f.clone();
    for (i, conv) in params.convs.iter().enumerate() {
        x = conv_same(&x, conv);
        if i < 2 {
            x = x.map(|v| v.max(0.0));
        }
        x = upsample(&x, 2);
    }
    x.map(|v| v.clamp(1e-3, 120.0))
}

/// PQ by scanning every (gt, pred) segment pair pixel by pixel; returns
/// `(PQ, SQ, RQ)` averaged over the classes present.
pub fn panoptic_quality(pred: &PanopticMap, gt: &PanopticMap, tax: &Taxonomy) -> (f64, f64, f64) {
    let segments = |m: &PanopticMap| {
        let mut s: Vec<(usize, usize)> = m.class.iter().copied().zip(m.instance.iter().copied()).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let (gs, ps) = (segments(gt), segments(pred));
    let n = tax.num_classes();
    let (mut tp, mut fp, mut fn_) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut iou_sum = vec![0.0; n];
    let mut pred_hit = vec![false; ps.len()];
    for g in &gs {
        let mut hit = false;
        for (k, p) in ps.iter().enumerate() {
            if p.0 != g.0 {
                continue;
            }
            let (mut inter, mut union) = (0usize, 0usize);
            for i in 0..gt.class.len() {
                let in_g = (gt.class[i], gt.instance[i]) == *g;
                let in_p = (pred.class[i], pred.instance[i]) == *p;
                inter += (in_g && in_p) as usize;
                union += (in_g || in_p) as usize;
            }
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                hit = true;
                pred_hit[k] = true;
                tp[g.0] += 1.0;
                iou_sum[g.0] += iou;
            }
        }
        if !hit {
            fn_[g.0] += 1.0;
        }
    }
    for (k, p) in ps.iter().enumerate() {
        if !pred_hit[k] {
            fp[p.0] += 1.0;
        }
    }
    let (mut pq, mut sq, mut rq, mut count) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..n {
        let denom = tp[c] + 0.5 * (fp[c] + fn_[c]);
        if denom == 0.0 {
            continue;
        }
        count += 1.0;
        pq += iou_sum[c] / denom;
        rq += tp[c] / denom;
        if tp[c] > 0.0 {
            sq += iou_sum[c] / tp[c];
        }
    }
    if count == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    (pq / count, sq / count, rq / count)
}

/// AP by listing every precision/recall point after greedy matching, then
/// taking the running maximum from the right at 101 recall levels.
pub fn distance_ap(preds: &[DetectionResult], gts: &[GroundTruth3D], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let mut tp = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.class_id != p.class_id || gt.sample != p.sample {
                continue;
            }
            let dx = p.box3d.center[0] - gt.box3d.center[0];
            let dz = p.box3d.center[2] - gt.box3d.center[2];
            let d = (dx * dx + dz * dz).sqrt();
            if d <= threshold && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((g, d));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            tp += 1.0;
        }
        recall.push(tp / gts.len() as f64);
        precision.push(tp / (rank + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        if let Some(k) = recall.iter().position(|&x| x >= level - 1e-12) {
            total += precision[k];
        }
    }
    total / 101.0
}

/// `[AbsRel, δ1, δ2, δ3, RMSE]` by a plain loop over valid pixels.
pub fn depth_metrics(pred: &[f64], gt: &[f64], valid: &[bool]) -> [f64; 5] {
    let mut out = [0.0; 5];
    let mut n = 0.0;
    for i in 0..gt.len() {
        if !valid[i] {
            continue;
        }
        n += 1.0;
        out[0] += (pred[i] - gt[i]).abs() / gt[i];
        let ratio = if pred[i] > gt[i] { pred[i] / gt[i] } else { gt[i] / pred[i] };
        out[1] += (ratio < 1.25) as u8 as f64;
        out[2] += (ratio < 1.5625) as u8 as f64;
        out[3] += (ratio < 1.953125) as u8 as f64;
        out[4] += (pred[i] - gt[i]).powi(2);
    }
    for v in out.iter_mut().take(4) {
        *v /= n;
    }
    out[4] = (out[4] / n).sqrt();
    out
}
