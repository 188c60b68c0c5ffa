//! Panoptic quality, distance-matched detection AP with NDS, and depth
//! error metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::geometry::{wrap_angle, Box3D};

/// Class names; ids `0..stuff.len()` are stuff, the rest things.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub stuff: Vec<String>,
    pub things: Vec<String>,
}

impl Taxonomy {
    pub fn num_classes(&self) -> usize {
        self.stuff.len() + self.things.len()
    }

    pub fn is_thing(&self, class: usize) -> bool {
        class >= self.stuff.len() && class < self.num_classes()
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.stuff.iter().chain(&self.things).nth(class).map(String::as_str)
    }
}

/// Per-pixel `(class, instance)` labels; stuff carries instance 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub class: Vec<usize>,
    pub instance: Vec<usize>,
}

impl PanopticMap {
    pub fn new(height: usize, width: usize, class: Vec<usize>, instance: Vec<usize>) -> Result<Self> {
        if class.len() != height * width || instance.len() != height * width {
            return Err(shape_err(
                "PanopticMap",
                format!("{}×{} map with {} classes and {} instances", height, width, class.len(), instance.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            class,
            instance,
        })
    }

    pub fn validate(&self, tax: &Taxonomy) -> Result<()> {
        for (&c, &i) in self.class.iter().zip(&self.instance) {
            if c >= tax.num_classes() {
                return Err(arg_err("PanopticMap", format!("class {c} outside the taxonomy")));
            }
            if tax.is_thing(c) != (i > 0) {
                return Err(arg_err(
                    "PanopticMap",
                    format!("class {c} with instance {i}: things need ids > 0, stuff 0"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPq {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl ClassPq {
    fn present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn pq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.iou_sum / denom
        }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.tp as f64 / denom
        }
    }
}

/// Class-averaged quality scores. Averages run over classes that appear in
/// either map; `SQ·RQ = PQ` holds per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: f64,
    pub pq_stuff: f64,
    pub per_class: Vec<ClassPq>,
}

fn segment_areas(m: &PanopticMap) -> HashMap<(usize, usize), usize> {
    let mut areas = HashMap::new();
    for (&c, &i) in m.class.iter().zip(&m.instance) {
        *areas.entry((c, i)).or_insert(0) += 1;
    }
    areas
}

fn mean_over(vals: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in vals {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Segments match when they share a class and their IoU exceeds 0.5.
pub fn panoptic_quality(pred: &PanopticMap, gt: &PanopticMap, tax: &Taxonomy) -> Result<PanopticQuality> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(shape_err(
            "panoptic_quality",
            format!("{}×{} vs {}×{}", pred.height, pred.width, gt.height, gt.width),
        ));
    }
    pred.validate(tax)?;
    gt.validate(tax)?;
    let pa = segment_areas(pred);
    let ga = segment_areas(gt);
    let mut inter: HashMap<((usize, usize), (usize, usize)), usize> = HashMap::new();
    for p in 0..pred.class.len() {
        let (gc, pc) = (gt.class[p], pred.class[p]);
        if gc == pc {
            *inter.entry(((gc, gt.instance[p]), (pc, pred.instance[p]))).or_insert(0) += 1;
        }
    }
    let mut per_class = vec![ClassPq::default(); tax.num_classes()];
    let mut matched_gt = HashMap::new();
    let mut matched_pred = HashMap::new();
    let mut pairs: Vec<_> = inter.into_iter().collect();
    pairs.sort_unstable_by_key(|&(k, _)| k);
    for ((g, p), n) in pairs {
        let union = ga[&g] + pa[&p] - n;
        let iou = n as f64 / union as f64;
        if iou > 0.5 {
            let dup = matched_gt.insert(g, p).is_some() | matched_pred.insert(p, g).is_some();
            assert!(!dup, "IoU > 0.5 matches are unique");
            per_class[g.0].tp += 1;
            per_class[g.0].iou_sum += iou;
        }
    }
    for g in ga.keys() {
        if !matched_gt.contains_key(g) {
            per_class[g.0].fn_ += 1;
        }
    }
    for p in pa.keys() {
        if !matched_pred.contains_key(p) {
            per_class[p.0].fp += 1;
        }
    }
    Ok(summarize_pq(per_class, tax))
}

/// Class averages from per-class counts, e.g. summed over many images.
pub fn summarize_pq(per_class: Vec<ClassPq>, tax: &Taxonomy) -> PanopticQuality {
    let present = || per_class.iter().enumerate().filter(|(_, c)| c.present());
    PanopticQuality {
        pq: mean_over(present().map(|(_, c)| c.pq())),
        sq: mean_over(present().map(|(_, c)| c.sq())),
        rq: mean_over(present().map(|(_, c)| c.rq())),
        pq_things: mean_over(present().filter(|(k, _)| tax.is_thing(*k)).map(|(_, c)| c.pq())),
        pq_stuff: mean_over(present().filter(|(k, _)| !tax.is_thing(*k)).map(|(_, c)| c.pq())),
        per_class,
    }
}

impl ClassPq {
    pub fn merge(&mut self, other: &ClassPq) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub box3d: Box3D,
    pub score: f64,
    pub class_id: usize,
    /// Image the detection belongs to; matching never crosses images.
    #[serde(default)]
    pub sample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth3D {
    pub box3d: Box3D,
    pub class_id: usize,
    #[serde(default)]
    pub sample: usize,
}

/// Default matching thresholds in meters.
pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold used to pick true positives for the error metrics.
pub const TP_THRESHOLD: f64 = 2.0;

/// Center distance on the ground plane `(x, z)`.
pub fn ground_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[2] - b.center[2])
}

/// Greedy score-ordered matching; returns, per prediction in score order,
/// `(prediction index, matched ground truth)`.
pub fn greedy_match(preds: &[DetectionResult], gts: &[GroundTruth3D], threshold: f64) -> Vec<(usize, Option<usize>)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let p = &preds[i];
            let best = gts
                .iter()
                .enumerate()
                .filter(|(g, gt)| !taken[*g] && gt.class_id == p.class_id && gt.sample == p.sample)
                .map(|(g, gt)| (g, ground_distance(&p.box3d, &gt.box3d)))
                .filter(|&(_, d)| d <= threshold)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (i, best.map(|(g, _)| g))
        })
        .collect()
}

/// Area under the 101-point interpolated precision-recall curve. Zero when
/// there is no ground truth.
pub fn distance_ap(preds: &[DetectionResult], gts: &[GroundTruth3D], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let matches = greedy_match(preds, gts, threshold);
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(matches.len());
    for (k, (_, m)) in matches.iter().enumerate() {
        tp += m.is_some() as usize;
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        total += curve
            .iter()
            .filter(|(rec, _)| *rec >= level - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
    }
    total / 101.0
}

/// AP averaged over the thresholds and over the classes present in `gts`.
pub fn mean_ap(preds: &[DetectionResult], gts: &[GroundTruth3D], thresholds: &[f64]) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    mean_over(classes.iter().map(|&c| {
        let p: Vec<DetectionResult> = preds.iter().filter(|d| d.class_id == c).cloned().collect();
        let g: Vec<GroundTruth3D> = gts.iter().filter(|d| d.class_id == c).cloned().collect();
        mean_over(thresholds.iter().map(|&t| distance_ap(&p, &g, t)))
    }))
}

/// Mean true-positive errors `(ATE, ASE, AOE, AVE, AAE)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

/// `1 − IoU` of two boxes after aligning their centers and orientation.
pub fn scale_error(a: &Box3D, b: &Box3D) -> f64 {
    let inter: f64 = (0..3).map(|i| a.dims[i].min(b.dims[i])).product();
    let va: f64 = a.dims.iter().product();
    let vb: f64 = b.dims.iter().product();
    1.0 - inter / (va + vb - inter)
}

/// Errors over true positives at [`TP_THRESHOLD`]. No velocity exists, so
/// AVE is the worst value 1; AAE is the attribute error rate (1 when no
/// matched pair carries attributes). Every error is 1 without matches.
pub fn tp_errors(preds: &[DetectionResult], gts: &[GroundTruth3D]) -> TpErrors {
    let matches = greedy_match(preds, gts, TP_THRESHOLD);
    let pairs: Vec<(&Box3D, &Box3D)> = matches
        .iter()
        .filter_map(|&(p, g)| g.map(|g| (&preds[p].box3d, &gts[g].box3d)))
        .collect();
    if pairs.is_empty() {
        return TpErrors {
            ate: 1.0,
            ase: 1.0,
            aoe: 1.0,
            ave: 1.0,
            aae: 1.0,
        };
    }
    let attr: Vec<f64> = pairs
        .iter()
        .filter_map(|(p, g)| g.attribute.map(|ga| (p.attribute != Some(ga)) as u8 as f64))
        .collect();
    TpErrors {
        ate: mean_over(pairs.iter().map(|(p, g)| ground_distance(p, g))),
        ase: mean_over(pairs.iter().map(|(p, g)| scale_error(p, g))),
        aoe: mean_over(pairs.iter().map(|(p, g)| wrap_angle(p.yaw - g.yaw).abs())),
        ave: 1.0,
        aae: if attr.is_empty() { 1.0 } else { mean_over(attr.into_iter()) },
    }
}

/// `(5·mAP + Σ(1 − min(1, mTP))) / 10`.
pub fn nds(map: f64, mtp: &[f64; 5]) -> f64 {
    (5.0 * map + mtp.iter().map(|&e| 1.0 - e.min(1.0)).sum::<f64>()) / 10.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rmse: f64,
}

/// Errors over pixels where `valid` is set; ground truth must be positive
/// there.
pub fn depth_metrics(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(shape_err(
            "depth_metrics",
            format!("{} predictions, {} targets, {} mask entries", pred.len(), gt.len(), valid.len()),
        ));
    }
    let (mut n, mut rel, mut sq) = (0usize, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for i in (0..gt.len()).filter(|&i| valid[i]) {
        let (p, g) = (pred[i], gt[i]);
        if !(g > 0.0) {
            return Err(arg_err("depth_metrics", format!("ground truth {g} at valid pixel {i}")));
        }
        n += 1;
        rel += (p - g).abs() / g;
        sq += (p - g) * (p - g);
        let delta = (p / g).max(g / p);
        for (k, h) in hits.iter_mut().enumerate() {
            if delta < 1.25f64.powi(k as i32 + 1) {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return Err(arg_err("depth_metrics", "no valid pixels"));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: rel / nf,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        rmse: (sq / nf).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tax() -> Taxonomy {
        Taxonomy {
            stuff: vec!["sky".into(), "ground".into()],
            things: vec!["car".into(), "person".into()],
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> PanopticMap {
        let mut class = vec![0; h * w];
        let mut inst = vec![0; h * w];
        for p in 0..h * w {
            class[p] = if p / w < h / 2 { 0 } else { 1 };
        }
        for id in 1..=3 {
            let (y, x) = (rng.gen_range(0..h - 2), rng.gen_range(0..w - 2));
            let (bh, bw) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let c = rng.gen_range(2..4);
            for yy in y..(y + bh).min(h) {
                for xx in x..(x + bw).min(w) {
                    class[yy * w + xx] = c;
                    inst[yy * w + xx] = id;
                }
            }
        }
        PanopticMap::new(h, w, class, inst).unwrap()
    }

    #[test]
    fn identity_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_map(&mut rng, 8, 8);
        let q = panoptic_quality(&m, &m, &tax()).unwrap();
        assert_eq!((q.pq, q.sq, q.rq), (1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_maps_score_zero() {
        let a = PanopticMap::new(2, 2, vec![0; 4], vec![0; 4]).unwrap();
        let b = PanopticMap::new(2, 2, vec![1; 4], vec![0; 4]).unwrap();
        let q = panoptic_quality(&a, &b, &tax()).unwrap();
        assert_eq!(q.pq, 0.0);
    }

    #[test]
    fn rejects_bad_maps() {
        let a = PanopticMap::new(1, 2, vec![0, 9], vec![0, 0]).unwrap();
        assert!(panoptic_quality(&a, &a, &tax()).is_err());
        let b = PanopticMap::new(1, 2, vec![2, 2], vec![0, 0]).unwrap();
        assert!(panoptic_quality(&b, &b, &tax()).is_err());
        let c = PanopticMap::new(1, 1, vec![0], vec![0]).unwrap();
        assert!(panoptic_quality(&a, &c, &tax()).is_err());
    }

    #[test]
    fn matches_exhaustive_matcher() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_map(&mut rng, 8, 8);
            let pred = random_map(&mut rng, 8, 8);
            let q = panoptic_quality(&pred, &gt, &tax()).unwrap();
            let want = oracles::panoptic_quality(&pred, &gt, &tax());
            assert!((q.pq - want.0).abs() < 1e-12, "seed {seed}");
            for c in &q.per_class {
                assert!((c.sq() * c.rq() - c.pq()).abs() < 1e-12);
            }
        }
    }

    fn det(x: f64, z: f64, score: f64) -> DetectionResult {
        DetectionResult {
            box3d: Box3D::new([x, 1.0, z], [1.5, 1.6, 4.0], 0.0).unwrap(),
            score,
            class_id: 2,
            sample: 0,
        }
    }

    fn gtb(x: f64, z: f64) -> GroundTruth3D {
        GroundTruth3D {
            box3d: Box3D::new([x, 1.0, z], [1.5, 1.6, 4.0], 0.0).unwrap(),
            class_id: 2,
            sample: 0,
        }
    }

    #[test]
    fn perfect_and_empty_ap() {
        let gts = vec![gtb(0.0, 10.0), gtb(3.0, 20.0)];
        let preds = vec![det(0.0, 10.0, 0.9), det(3.0, 20.0, 0.8)];
        assert_eq!(distance_ap(&preds, &gts, 0.5), 1.0);
        assert_eq!(distance_ap(&[], &gts, 0.5), 0.0);
    }

    #[test]
    fn spoiled_boxes_match_hand_enumeration() {
        let gts: Vec<_> = (0..5).map(|i| gtb(i as f64 * 5.0, 10.0 + i as f64)).collect();
        let mut preds: Vec<_> = (0..5).map(|i| det(i as f64 * 5.0, 10.0 + i as f64, 0.9 - 0.1 * i as f64)).collect();
        preds[1].box3d.center[0] += 3.0;
        preds[3].box3d.center[2] += 3.0;
        // Score order: TP, FP, TP, FP, TP. Recall 0.2, 0.2, 0.4, 0.4, 0.6 with
        // precision 1, 1/2, 2/3, 1/2, 3/5. Interpolated precision is 1 up to
        // recall 0.2, 2/3 up to 0.4, 3/5 up to 0.6, then 0.
        let want = (21.0 * 1.0 + 20.0 * (2.0 / 3.0) + 20.0 * 0.6) / 101.0;
        assert!((distance_ap(&preds, &gts, 2.0) - want).abs() < 1e-12);
        assert!((distance_ap(&preds, &gts, 2.0) - oracles::distance_ap(&preds, &gts, 2.0)).abs() < 1e-12);
    }

    #[test]
    fn ap_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gts: Vec<_> = (0..6).map(|_| gtb(rng.gen_range(-5.0..5.0), rng.gen_range(5.0..30.0))).collect();
        let preds: Vec<_> = gts
            .iter()
            .map(|g| det(g.box3d.center[0] + rng.gen_range(-1.5..1.5), g.box3d.center[2] + rng.gen_range(-1.5..1.5), rng.gen()))
            .collect();
        let shift = |b: &mut Box3D| {
            b.center[0] += 7.25;
            b.center[2] += 3.5;
        };
        let mut g2 = gts.clone();
        g2.iter_mut().for_each(|g| shift(&mut g.box3d));
        let mut p2 = preds.clone();
        p2.iter_mut().for_each(|p| shift(&mut p.box3d));
        for t in DISTANCE_THRESHOLDS {
            assert!((distance_ap(&preds, &gts, t) - distance_ap(&p2, &g2, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn nds_examples_and_monotonicity() {
        assert_eq!(nds(1.0, &[0.0; 5]), 1.0);
        assert_eq!(nds(0.0, &[1.0, 2.0, 1.0, 5.0, 1.0]), 0.0);
        assert!((nds(0.4, &[0.5, 0.2, 0.1, 0.3, 0.0]) - 0.59).abs() < 1e-12);
        let base = [0.3, 0.4, 0.2, 1.0, 0.5];
        assert!(nds(0.5, &base) >= nds(0.4, &base));
        for i in 0..5 {
            let mut worse = base;
            worse[i] += 0.1;
            assert!(nds(0.5, &worse) <= nds(0.5, &base));
        }
    }

    #[test]
    fn tp_errors_of_exact_matches() {
        let gts = vec![gtb(0.0, 10.0)];
        let preds = vec![det(0.0, 10.0, 0.9)];
        let e = tp_errors(&preds, &gts);
        assert_eq!((e.ate, e.ase, e.aoe, e.ave), (0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn depth_metric_examples() {
        let gt = vec![2.0, 5.0, 10.0, 40.0];
        let valid = vec![true; 4];
        let m = depth_metrics(&gt, &gt, &valid).unwrap();
        assert_eq!(m, DepthMetrics { abs_rel: 0.0, delta1: 1.0, delta2: 1.0, delta3: 1.0, rmse: 0.0 });
        let scaled: Vec<f64> = gt.iter().map(|g| 1.3 * g).collect();
        let m = depth_metrics(&scaled, &gt, &valid).unwrap();
        assert!((m.abs_rel - 0.3).abs() < 1e-12);
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 1.0);
        assert!(depth_metrics(&gt, &gt, &[false; 4]).is_err());
    }

    #[test]
    fn depth_metrics_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt: Vec<f64> = (0..200).map(|_| rng.gen_range(0.5..100.0)).collect();
        let pred: Vec<f64> = (0..200).map(|_| rng.gen_range(0.5..100.0)).collect();
        let valid: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.7)).collect();
        let got = depth_metrics(&pred, &gt, &valid).unwrap();
        let want = oracles::depth_metrics(&pred, &gt, &valid);
        for (a, b) in [
            (got.abs_rel, want[0]),
            (got.delta1, want[1]),
            (got.delta2, want[2]),
            (got.delta3, want[3]),
            (got.rmse, want[4]),
        ] {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
