//! Acceptance suites with a machine-readable pass/fail report.
//!
//! Criteria are numbered 1 to 10; harness invariants that sit outside the
//! numbered list (scene generation, determinism, report schema) use 0.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branches::{
    crop_roi_var, embedding_at_var, instance_level_var, split_dynamic_tensors_var, InstanceBranchParams,
};
use crate::dynamic_ops::{
    dense_merge_level_var, dr1_linear, dr1conv, dr1conv_var, oracle_dense_dynamic_conv, DR1ConvLayer, PositionKernels,
    Rank1Factors,
};
use crate::error::{Error, Result};
use crate::geometry::{
    backproject, box_corners, project, relative_crop_params, update_intrinsics, yaw_to_alpha, Box3D, CameraIntrinsics,
};
use crate::heads::{
    aggregate_instance_embeddings_var, attention_maps_var, attribute_loss_var, bce_with_logits_var,
    center_offset_loss_var, corner_terms, corner_terms_var, decode_3d_var, depth_head_var, depth_l1_var,
    factored_attention_mask, factored_attention_params, factored_attention_mask_var, full_attention_params,
    panoptic_logits_var, pixel_cross_entropy_var, total_loss, total_loss_var, AttentionBasis, DecodeParams,
    DepthHeadParams, LossComponents, LossWeights, PanopticWeights, Pred3D, SegEmbedding, ATTENTION_RANK,
    ATTENTION_SIZE,
};
use crate::metrics::{depth_metrics, nds, panoptic_quality, PanopticMap, Taxonomy};
use crate::numerics::{grad_check_sampled, Conv, Tape, Tensor, Var};
use crate::oracles;
use crate::routing::{channel_router_var, route_features_var, route_tasks_var, task_router_var, RouterParams, RoutingMode};

use super::bench::{bench_dr1conv, BenchConfig, BenchReport};
use super::model::{NetConfig, SceneTargets, Task, ToyNet};
use super::scene::{gen_scene, taxonomy, SceneConfig, GROUND, SKY};
use super::train::{train_toy, TrainConfig, TrainReport, TrainStatus};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;
/// Coordinates probed per gradient check; smaller inputs are checked fully.
pub const GRAD_MAX_COORDS: usize = 48;
pub const OVERFIT_STEPS: usize = 500;
pub const OVERFIT_WINDOW: usize = 50;
pub const OVERFIT_LR: f64 = 5e-4;
pub const COTRAIN_STEPS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `value < bound`
    Below,
    /// `value <= bound`
    AtMost,
    /// `value >= bound`
    AtLeast,
    /// `value == bound`
    Equal,
}

impl Comparison {
    fn holds(self, value: f64, bound: f64) -> bool {
        match self {
            Comparison::Below => value < bound,
            Comparison::AtMost => value <= bound,
            Comparison::AtLeast => value >= bound,
            Comparison::Equal => value == bound,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparison::Below => "<",
            Comparison::AtMost => "<=",
            Comparison::AtLeast => ">=",
            Comparison::Equal => "==",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u32,
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub comparison: Comparison,
    pub bound: f64,
    pub detail: String,
}

impl Check {
    /// Non-finite values fail and are stored as `±f64::MAX` so the report
    /// stays valid JSON.
    pub fn new(criterion: u32, name: impl Into<String>, value: f64, comparison: Comparison, bound: f64) -> Self {
        Self {
            criterion,
            name: name.into(),
            passed: value.is_finite() && comparison.holds(value, bound),
            value: if value.is_nan() { f64::MAX } else { value.clamp(-f64::MAX, f64::MAX) },
            comparison,
            bound,
            detail: String::new(),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    fn failed(criterion: u32, name: &str, err: &Error) -> Self {
        Self {
            criterion,
            name: name.into(),
            passed: false,
            value: 0.0,
            comparison: Comparison::Equal,
            bound: 1.0,
            detail: err.to_string(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] {}: {:.6e} {} {:.6e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.value,
            self.comparison.symbol(),
            self.bound
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub seconds: f64,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn criterion_passed(&self, criterion: u32) -> bool {
        self.checks
            .iter()
            .filter(|c| c.criterion == criterion)
            .all(|c| c.passed)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyOptions {
    /// Negates every dr1conv output seen by the equivalence checks.
    pub flip_dr1conv_sign: bool,
    /// Criteria to run; empty runs 0 through 10.
    pub criteria: Vec<u32>,
}

pub const ALL_CRITERIA: [u32; 11] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

/// Wall-clock limits in seconds, where a criterion has one.
pub fn runtime_limit(criterion: u32) -> Option<f64> {
    match criterion {
        1 => Some(5.0),
        3 => Some(60.0),
        10 => Some(120.0),
        _ => None,
    }
}

/// Runs the selected criteria. A criterion that errors is recorded as a
/// failed check rather than aborting the run.
pub fn run_verification(opts: &VerifyOptions) -> Result<VerifyReport> {
    let t0 = Instant::now();
    let selected: Vec<u32> = if opts.criteria.is_empty() {
        ALL_CRITERIA.to_vec()
    } else {
        opts.criteria.clone()
    };
    let mut checks = Vec::new();
    for &c in &selected {
        checks.extend(run_criterion(c, opts));
    }
    let mut report = VerifyReport {
        passed: false,
        seconds: 0.0,
        checks,
    };
    if selected.contains(&0) {
        let json = serde_json::to_string(&report)?;
        let back: VerifyReport = serde_json::from_str(&json)?;
        let same = (back == report) as u8 as f64;
        report
            .checks
            .push(Check::new(0, "report_json_round_trip", same, Comparison::Equal, 1.0));
    }
    report.passed = report.checks.iter().all(|c| c.passed);
    report.seconds = t0.elapsed().as_secs_f64();
    Ok(report)
}

/// Checks of one criterion, followed by its runtime check when it has a limit.
pub fn run_criterion(criterion: u32, opts: &VerifyOptions) -> Vec<Check> {
    let t0 = Instant::now();
    let out = match criterion {
        0 => harness_invariants(),
        1 => rank1_equivalence(opts),
        2 => degeneracy(opts),
        3 => gradient_suite(),
        4 => factored_attention(),
        5 => geometry(),
        6 => corner_disentanglement(),
        7 => metrics(),
        8 => loss_weights(),
        9 => toy_training(),
        10 => performance(),
        n => Err(crate::error::arg_err("run_verification", format!("no criterion {n}"))),
    };
    let mut checks = out.unwrap_or_else(|e| vec![Check::failed(criterion, "suite_error", &e)]);
    if let Some(limit) = runtime_limit(criterion) {
        let secs = t0.elapsed().as_secs_f64();
        checks.push(Check::new(criterion, "runtime_s", secs, Comparison::Below, limit));
    }
    checks
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::rand_uniform(r, shape, -1.0, 1.0)
}

/// `max |got - want| / max |want|`.
fn rel_err(got: &Tensor, want: &Tensor) -> f64 {
    if got.shape() != want.shape() {
        return f64::INFINITY;
    }
    let scale = want.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    got.max_abs_diff(want) / scale.max(f64::MIN_POSITIVE)
}

fn dr1conv_under_test(x: &Tensor, f: &Rank1Factors, layer: &DR1ConvLayer, opts: &VerifyOptions) -> Result<Tensor> {
    let y = dr1conv(x, f, layer)?;
    Ok(if opts.flip_dr1conv_sign { y.map(|v| -v) } else { y })
}

fn random_factors(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Result<Rank1Factors> {
    Rank1Factors::new(uniform(r, &[c, h, w]), uniform(r, &[c, h, w]))
}

fn rank1_equivalence(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut worst_linear = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(seed);
        let (m, d) = (r.gen_range(2..=16), r.gen_range(2..=16));
        let w = uniform(&mut r, &[m, d]);
        let x = uniform(&mut r, &[d]);
        let a = uniform(&mut r, &[d]);
        let b = uniform(&mut r, &[m]);
        let got = dr1_linear(&w, &x, &a, &b)?;
        let want = Tensor::from_fn(&[m], |i| {
            (0..d)
                .map(|j| w.at2(i, j) * b.data()[i] * a.data()[j] * x.data()[j])
                .sum()
        });
        worst_linear = worst_linear.max(rel_err(&got, &want));
    }
    let mut worst_conv = [0.0f64; 2];
    for (slot, k) in [1usize, 3].into_iter().enumerate() {
        for seed in 0..20 {
            let mut r = rng(100 + seed);
            let c = r.gen_range(2..=16);
            let (h, w) = (r.gen_range(2..=12), r.gen_range(2..=12));
            let x = uniform(&mut r, &[c, h, w]);
            let f = random_factors(&mut r, c, h, w)?;
            let weight = uniform(&mut r, &[c, c, k, k]);
            let layer = DR1ConvLayer::new(weight.clone(), None)?;
            let got = dr1conv_under_test(&x, &f, &layer, opts)?;
            let kernels = PositionKernels::Rank1 {
                weight: &weight,
                factors: &f,
            };
            let want = oracle_dense_dynamic_conv(&x, &kernels)?;
            worst_conv[slot] = worst_conv[slot].max(rel_err(&got, &want));
        }
    }
    Ok(vec![
        Check::new(1, "dr1_linear_vs_dense", worst_linear, Comparison::Below, 1e-10)
            .with_detail("20 seeds, sizes 2..=16, max relative error"),
        Check::new(1, "dr1conv_1x1_vs_per_position", worst_conv[0], Comparison::Below, 1e-10)
            .with_detail("20 seeds"),
        Check::new(1, "dr1conv_3x3_vs_per_position", worst_conv[1], Comparison::Below, 1e-10)
            .with_detail("20 seeds"),
    ])
}

fn small_scene_config() -> SceneConfig {
    SceneConfig {
        height: 64,
        width: 96,
        min_objects: 2,
        ..Default::default()
    }
}

/// Every loss component and prediction map of one forward pass, flattened.
fn forward_values(net: &ToyNet, targets: &SceneTargets) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bound = net.store.bind_frozen(&tape);
    let out = net.forward(&tape, &net.bind(&bound), targets)?;
    let mut v = Vec::new();
    for (_, c) in out.losses.named() {
        v.push(match c {
            Some(x) => x.item()?,
            None => f64::NAN,
        });
    }
    if let Some((logits, _)) = &out.predictions.panoptic {
        v.extend_from_slice(logits.data());
    }
    if let Some(d) = &out.predictions.depth {
        v.extend_from_slice(d.data());
    }
    Ok(v)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| {
        if x.is_nan() && y.is_nan() {
            m
        } else {
            m.max((x - y).abs())
        }
    })
}

fn degeneracy(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut worst_unit = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(200 + seed);
        let k = [1usize, 3, 5][seed as usize % 3];
        let c = r.gen_range(1..=8);
        let (h, w) = (r.gen_range(3..=10), r.gen_range(3..=10));
        let x = uniform(&mut r, &[c, h, w]);
        let weight = uniform(&mut r, &[c, c, k, k]);
        let bias = (seed % 2 == 1).then(|| uniform(&mut r, &[c]));
        let layer = DR1ConvLayer::new(weight.clone(), bias.clone())?;
        let got = dr1conv_under_test(&x, &Rank1Factors::unit(c, h, w), &layer, opts)?;
        let want = oracles::conv2d(&x, &weight, bias.as_ref(), 1, k / 2);
        worst_unit = worst_unit.max(got.max_abs_diff(&want));
    }
    let mut worst_route = 0.0f64;
    for seed in 0..5 {
        let scene = gen_scene(300 + seed, &small_scene_config())?;
        let mut values = Vec::new();
        for mode in [RoutingMode::Disabled, RoutingMode::PassThrough] {
            let net = ToyNet::new(NetConfig::tiny(Task::ALL.to_vec(), mode), seed)?;
            let targets = SceneTargets::new(&scene, &net.config.branch)?;
            values.push(forward_values(&net, &targets)?);
        }
        worst_route = worst_route.max(max_diff(&values[0], &values[1]));
    }
    Ok(vec![
        Check::new(2, "dr1conv_unit_factors_vs_conv2d", worst_unit, Comparison::AtMost, 1e-12)
            .with_detail("20 seeds, kernels 1/3/5, max abs difference"),
        Check::new(2, "pass_through_vs_no_routing", worst_route, Comparison::AtMost, 1e-12)
            .with_detail("3-task forward on 5 scenes: losses, panoptic logits, depth"),
    ])
}

/// Worst finite-difference error per operation across seeds.
struct GradSuite {
    rows: Vec<(String, f64, usize, usize)>,
}

impl GradSuite {
    fn check<F>(&mut self, op: &str, seed: u64, x: &Tensor, f: F) -> Result<()>
    where
        F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
    {
        let rep = grad_check_sampled(op, f, x, GRAD_EPS, GRAD_TOL, GRAD_MAX_COORDS, seed)?;
        let err = rep.max_rel_error;
        match self.rows.iter_mut().find(|r| r.0 == op) {
            Some(row) => {
                row.1 = row.1.max(err);
                row.2 += 1;
                row.3 += rep.coords_checked;
            }
            None => self.rows.push((op.to_string(), err, 1, rep.coords_checked)),
        }
        Ok(())
    }
}

fn weighted<'t>(y: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    y.mul(y.tape().constant(w.clone()))?.sum().reshape(&[1])
}

fn konst<'t>(like: Var<'t>, t: &Tensor) -> Var<'t> {
    like.tape().constant(t.clone())
}

/// Uniform magnitudes in `[lo, hi]` with random signs.
fn signed(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(lo..hi);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn primitive_grads(g: &mut GradSuite, seed: u64) -> Result<()> {
    let mut r = rng(1000 + seed);
    let x = uniform(&mut r, &[3, 4]);
    let c = uniform(&mut r, &[3, 4]);
    let w = uniform(&mut r, &[3, 4]);
    g.check("add", seed, &x, |v| weighted(v.add(konst(v, &c))?, &w))?;
    g.check("sub", seed, &x, |v| weighted(konst(v, &c).sub(v)?, &w))?;
    g.check("mul", seed, &x, |v| weighted(v.mul(konst(v, &c))?.mul(v)?, &w))?;
    let col = uniform(&mut r, &[3, 1]);
    g.check("add_broadcast", seed, &col, |v| weighted(konst(v, &c).add(v)?, &w))?;
    let per_channel = uniform(&mut r, &[2, 1, 1]);
    let cube = uniform(&mut r, &[2, 3, 4]);
    let wc = uniform(&mut r, &[2, 3, 4]);
    g.check("mul_broadcast", seed, &per_channel, |v| weighted(konst(v, &cube).mul(v)?, &wc))?;
    let nz = signed(&mut r, &[3, 4], 0.5, 1.5);
    g.check("div", seed, &nz, |v| {
        weighted(konst(v, &c).div(v)?, &w)?.add(weighted(v.div(konst(v, &nz))?.mul(v)?, &w)?)
    })?;
    g.check("scale_neg_add_scalar", seed, &x, |v| weighted(v.scale(1.7).neg().add_scalar(0.3).square(), &w))?;
    g.check("exp", seed, &x, |v| weighted(v.exp(), &w))?;
    let pos = Tensor::rand_uniform(&mut r, &[3, 4], 0.5, 2.0);
    g.check("ln", seed, &pos, |v| weighted(v.ln(), &w))?;
    g.check("sqrt", seed, &pos, |v| weighted(v.sqrt(), &w))?;
    g.check("square", seed, &x, |v| weighted(v.square(), &w))?;
    let wide = Tensor::rand_uniform(&mut r, &[3, 4], -3.0, 3.0);
    g.check("sigmoid", seed, &wide, |v| weighted(v.sigmoid(), &w))?;
    g.check("softplus", seed, &wide, |v| weighted(v.softplus(), &w))?;
    let off_zero = signed(&mut r, &[3, 4], 0.1, 1.0);
    g.check("relu", seed, &off_zero, |v| weighted(v.relu(), &w))?;
    g.check("abs", seed, &off_zero, |v| weighted(v.abs(), &w))?;
    let off_bounds = Tensor::from_fn(&[3, 4], |_| {
        let m = r.gen_range(0.0..0.9);
        [m - 0.95, m + 1.05, -(m + 1.05)][r.gen_range(0..3)]
    });
    g.check("clamp", seed, &off_bounds, |v| weighted(v.clamp(-1.0, 1.0).square(), &w))?;
    g.check("sum", seed, &x, |v| v.sum().square().reshape(&[1]))?;
    g.check("mean", seed, &x, |v| v.mean().square().reshape(&[1]))?;
    let w_axis0 = uniform(&mut r, &[1, 3, 4]);
    let w_axis2 = uniform(&mut r, &[2, 3, 1]);
    g.check("sum_axis", seed, &cube, |v| {
        weighted(v.sum_axis(0)?.square(), &w_axis0)?.add(weighted(v.sum_axis(2)?.square(), &w_axis2)?)
    })?;
    g.check("softmax", seed, &x, |v| weighted(v.softmax(1)?, &w))?;
    g.check("log_softmax", seed, &x, |v| weighted(v.log_softmax(0)?, &w))?;
    let right = uniform(&mut r, &[4, 2]);
    let left = uniform(&mut r, &[2, 3]);
    let w32 = uniform(&mut r, &[3, 2]);
    let w24 = uniform(&mut r, &[2, 4]);
    g.check("matmul", seed, &x, |v| {
        weighted(v.matmul(konst(v, &right))?, &w32)?.add(weighted(konst(v, &left).matmul(v)?, &w24)?)
    })?;
    let w43 = uniform(&mut r, &[4, 3]);
    g.check("transpose", seed, &x, |v| weighted(v.transpose()?.square(), &w43))?;
    let w62 = uniform(&mut r, &[6, 2]);
    g.check("reshape", seed, &x, |v| weighted(v.reshape(&[6, 2])?.exp(), &w62))?;
    let w32b = uniform(&mut r, &[3, 2]);
    g.check("slice", seed, &x, |v| weighted(v.slice(1, 1, 3)?.square(), &w32b))?;
    let w54 = uniform(&mut r, &[5, 4]);
    let extra = uniform(&mut r, &[2, 4]);
    g.check("concat", seed, &x, |v| {
        weighted(v.tape().concat(&[konst(v, &extra), v.square()], 0)?, &w54)
    })?;
    let idx: Vec<usize> = (0..7).map(|_| r.gen_range(0..12)).collect();
    let w7 = uniform(&mut r, &[7]);
    g.check("gather", seed, &x, |v| weighted(v.gather(idx.clone(), &[7])?.square(), &w7))?;

    let map = uniform(&mut r, &[2, 5, 6]);
    let w_crop = uniform(&mut r, &[2, 4, 5]);
    g.check("crop_hw", seed, &map, |v| weighted(v.crop_hw(4, 5)?.square(), &w_crop))?;
    let w_gap = uniform(&mut r, &[2]);
    g.check("gap", seed, &map, |v| weighted(v.square().gap()?.reshape(&[2])?, &w_gap))?;
    let w_up2 = uniform(&mut r, &[2, 10, 12]);
    let w_up4 = uniform(&mut r, &[2, 20, 24]);
    g.check("upsample_aligned", seed, &map, |v| {
        weighted(v.upsample_aligned(2)?, &w_up2)?.add(weighted(v.upsample_aligned(4)?, &w_up4)?)
    })?;
    let points: Vec<(f64, f64)> = (0..6)
        .map(|_| (r.gen_range(0.0..4.0), r.gen_range(0.0..5.0)))
        .collect();
    let w_samp = uniform(&mut r, &[2, 2, 3]);
    g.check("sample_bilinear", seed, &map, |v| {
        weighted(v.square().sample_bilinear(&points, 2, 3)?, &w_samp)
    })?;

    let kernel = uniform(&mut r, &[3, 2, 3, 3]);
    let bias = uniform(&mut r, &[3]);
    let w_s1 = uniform(&mut r, &[3, 5, 6]);
    let w_s2 = uniform(&mut r, &[3, 3, 3]);
    g.check("conv2d_input", seed, &map, |v| {
        let k = konst(v, &kernel);
        let b = konst(v, &bias);
        weighted(v.conv2d(k, Some(b), 1, 1)?, &w_s1)?.add(weighted(v.conv2d(k, Some(b), 2, 1)?, &w_s2)?)
    })?;
    g.check("conv2d_weight", seed, &kernel, |k| {
        weighted(konst(k, &map).conv2d(k, None, 2, 1)?.square(), &w_s2)
    })?;
    g.check("conv2d_bias", seed, &bias, |b| {
        let k = konst(b, &kernel);
        weighted(konst(b, &map).conv2d(k, Some(b), 1, 1)?.square(), &w_s1)
    })?;
    Ok(())
}

fn router(r: &mut ChaCha8Rng, routed: usize, cols: usize) -> RouterParams {
    RouterParams {
        weight: uniform(r, &[2 * routed, cols]),
        bias: uniform(r, &[2 * routed]),
    }
}

fn router_consts<'t>(like: Var<'t>, p: &RouterParams) -> RouterParams<Var<'t>> {
    p.map(|t| konst(like, t))
}

fn score_sum<'t>(s: &crate::routing::RoutingScores<Var<'t>>, wp: &Tensor, ws: &Tensor) -> Result<Var<'t>> {
    weighted(s.primary, wp)?.add(weighted(s.secondary, ws)?)
}

fn fix_layer<F: for<'t> Fn(Var<'t>) -> Result<DR1ConvLayer<Var<'t>>>>(f: F) -> F {
    f
}

fn fix2<F: for<'t> Fn(Var<'t>, Var<'t>) -> Result<Var<'t>>>(f: F) -> F {
    f
}

fn fix3<F: for<'t> Fn(Var<'t>, Var<'t>, Var<'t>) -> Result<Var<'t>>>(f: F) -> F {
    f
}

fn branch_grads(g: &mut GradSuite, seed: u64) -> Result<()> {
    let mut r = rng(2000 + seed);
    let (c, h, w) = (3, 4, 5);
    let x = uniform(&mut r, &[c, h, w]);
    let a = uniform(&mut r, &[c, h, w]);
    let b = uniform(&mut r, &[c, h, w]);
    let kernel = uniform(&mut r, &[c, c, 3, 3]);
    let wout = uniform(&mut r, &[c, h, w]);
    let layer = fix_layer(|v| {
        Ok(DR1ConvLayer {
            conv: Conv {
                weight: konst(v, &kernel),
                bias: None,
            },
        })
    });
    g.check("dr1conv_x", seed, &x, |v| {
        let f = Rank1Factors { a: konst(v, &a), b: konst(v, &b) };
        weighted(dr1conv_var(v, &f, &layer(v)?)?, &wout)
    })?;
    g.check("dr1conv_a", seed, &a, |v| {
        let f = Rank1Factors { a: v, b: konst(v, &b) };
        weighted(dr1conv_var(konst(v, &x), &f, &layer(v)?)?, &wout)
    })?;
    g.check("dr1conv_b", seed, &b, |v| {
        let f = Rank1Factors { a: konst(v, &a), b: v };
        weighted(dr1conv_var(konst(v, &x), &f, &layer(v)?)?.square(), &wout)
    })?;
    g.check("dr1conv_weight", seed, &kernel, |k| {
        let f = Rank1Factors { a: konst(k, &a), b: konst(k, &b) };
        let l = DR1ConvLayer {
            conv: Conv { weight: k, bias: None },
        };
        weighted(dr1conv_var(konst(k, &x), &f, &l)?.square(), &wout)
    })?;

    let p = uniform(&mut r, &[2, 4, 6]);
    let above = uniform(&mut r, &[2, 2, 3]);
    let mf = (uniform(&mut r, &[2, 4, 6]), uniform(&mut r, &[2, 4, 6]));
    let reduce = (uniform(&mut r, &[2, 2, 3, 3]), uniform(&mut r, &[2]));
    let dr1 = uniform(&mut r, &[2, 2, 3, 3]);
    let wm = uniform(&mut r, &[2, 4, 6]);
    let merge_loss = fix2(|p_, above_| {
        let f = Rank1Factors { a: konst(p_, &mf.0), b: konst(p_, &mf.1) };
        let red = Conv {
            weight: konst(p_, &reduce.0),
            bias: Some(konst(p_, &reduce.1)),
        };
        let l = DR1ConvLayer {
            conv: Conv { weight: konst(p_, &dr1), bias: None },
        };
        weighted(dense_merge_level_var(p_, Some(above_), &f, &red, &l)?, &wm)
    });
    g.check("dense_merge_level_lateral", seed, &p, |v| merge_loss(v, konst(v, &above)))?;
    g.check("dense_merge_level_above", seed, &above, |v| merge_loss(konst(v, &p), v))?;

    let feat = uniform(&mut r, &[8, 3, 4]);
    let other = uniform(&mut r, &[8, 3, 4]);
    let third = uniform(&mut r, &[8, 3, 4]);
    let ch = router(&mut r, 8, 8);
    let task = router(&mut r, 8, 9);
    let emb = uniform(&mut r, &[1]);
    let emb2 = uniform(&mut r, &[1]);
    let (wp, ws) = (uniform(&mut r, &[8]), uniform(&mut r, &[8]));
    let wf = uniform(&mut r, &[8, 3, 4]);
    g.check("channel_router_input", seed, &feat, |v| {
        score_sum(&channel_router_var(v, &router_consts(v, &ch))?, &wp, &ws)
    })?;
    g.check("channel_router_weight", seed, &ch.weight, |wv| {
        let p = RouterParams { weight: wv, bias: konst(wv, &ch.bias) };
        score_sum(&channel_router_var(konst(wv, &feat), &p)?, &wp, &ws)
    })?;
    g.check("task_router_embedding", seed, &emb, |e| {
        let s = task_router_var(konst(e, &feat), e, konst(e, &emb2), &router_consts(e, &task))?;
        score_sum(&s, &wp, &ws)
    })?;
    g.check("route_features", seed, &feat, |v| {
        let s = channel_router_var(v, &router_consts(v, &ch))?;
        weighted(route_features_var(v, konst(v, &other), &s)?, &wf)
    })?;
    let ch2 = router(&mut r, 8, 8);
    g.check("route_tasks", seed, &feat, |v| {
        let s1 = channel_router_var(v, &router_consts(v, &ch))?;
        let s2 = channel_router_var(v, &router_consts(v, &ch2))?;
        let feats = [v, konst(v, &other), konst(v, &third)];
        weighted(route_tasks_var(&feats, 0, &[(1, s1), (2, s2)])?, &wf)
    })?;

    let inst = InstanceBranchParams {
        tower: vec![Conv {
            weight: uniform(&mut r, &[4, 4, 3, 3]),
            bias: Some(uniform(&mut r, &[4])),
        }],
        top: Conv {
            weight: uniform(&mut r, &[8, 4, 3, 3]),
            bias: Some(uniform(&mut r, &[8])),
        },
    };
    let level = uniform(&mut r, &[4, 3, 4]);
    let (wa, wb, we) = (uniform(&mut r, &[2, 3, 4]), uniform(&mut r, &[2, 3, 4]), uniform(&mut r, &[4]));
    g.check("instance_level", seed, &level, |v| {
        let out = instance_level_var(v, &inst.constants(v.tape()), 4)?;
        let f = split_dynamic_tensors_var(out.m)?;
        let e = embedding_at_var(out.e, (1, 2))?;
        weighted(f.a, &wa)?.add(weighted(f.b.square(), &wb)?)?.add(weighted(e, &we)?)
    })?;

    let map = uniform(&mut r, &[3, 6, 7]);
    let x1 = r.gen_range(0.0..20.0);
    let y1 = r.gen_range(0.0..16.0);
    let bx = [x1, y1, x1 + r.gen_range(6.0..30.0), y1 + r.gen_range(6.0..28.0)];
    let wr = uniform(&mut r, &[3, 5, 5]);
    g.check("crop_roi", seed, &map, |v| weighted(crop_roi_var(v.square(), &bx, 5)?, &wr))?;
    Ok(())
}

fn head_grads(g: &mut GradSuite, seed: u64) -> Result<()> {
    let mut r = rng(3000 + seed);
    let (k, d, side) = (2, 3, ATTENTION_SIZE * 4);
    let basis = AttentionBasis {
        u: uniform(&mut r, &[k, ATTENTION_RANK, ATTENTION_SIZE]),
        v: uniform(&mut r, &[k, ATTENTION_RANK, ATTENTION_SIZE]),
    };
    let t = uniform(&mut r, &[k, d]);
    let s = uniform(&mut r, &[k, ATTENTION_RANK]);
    let roi = uniform(&mut r, &[d, side, side]);
    let target = Tensor::from_fn(&[side, side], |_| r.gen_bool(0.4) as u8 as f64);
    let wq = uniform(&mut r, &[k, ATTENTION_SIZE, ATTENTION_SIZE]);
    g.check("attention_maps", seed, &s, |v| {
        weighted(attention_maps_var(v, &basis.constants(v.tape()))?, &wq)
    })?;
    g.check("attention_basis", seed, &basis.u, |u| {
        let b = AttentionBasis { u, v: konst(u, &basis.v) };
        weighted(attention_maps_var(konst(u, &s), &b)?, &wq)
    })?;
    let mask_loss = fix3(|roi_, t_, s_| {
        let e = SegEmbedding { t: t_, s: s_ };
        let m = factored_attention_mask_var(roi_, &e, &basis.constants(roi_.tape()))?;
        bce_with_logits_var(m, &target)
    });
    g.check("factored_attention_mask_s", seed, &s, |v| mask_loss(konst(v, &roi), konst(v, &t), v))?;
    g.check("factored_attention_mask_t", seed, &t, |v| mask_loss(konst(v, &roi), v, konst(v, &s)))?;
    g.check("factored_attention_mask_roi", seed, &roi, |v| mask_loss(v, konst(v, &t), konst(v, &s)))?;

    let embs: Vec<Tensor> = (0..3).map(|_| uniform(&mut r, &[5])).collect();
    let we = uniform(&mut r, &[5]);
    g.check("aggregate_instance_embeddings", seed, &embs[1], |v| {
        let vars = [konst(v, &embs[0]), v, konst(v, &embs[2])];
        let mean = aggregate_instance_embeddings_var(&vars).expect("three embeddings")?;
        weighted(mean.square(), &we)
    })?;

    let f = uniform(&mut r, &[4, 3, 5]);
    let stuff = uniform(&mut r, &[4, 2]);
    let thing = uniform(&mut r, &[4, 3]);
    let labels: Vec<Option<usize>> = (0..15)
        .map(|_| if r.gen_bool(0.2) { None } else { Some(r.gen_range(0..5)) })
        .collect();
    let pano_loss = fix2(|f_, thing_| {
        let w = PanopticWeights {
            stuff: konst(f_, &stuff),
            thing: Some(thing_),
        };
        pixel_cross_entropy_var(panoptic_logits_var(f_, &w)?, &labels)
    });
    g.check("panoptic_logits_features", seed, &f, |v| pano_loss(v, konst(v, &thing)))?;
    g.check("panoptic_logits_thing_weights", seed, &thing, |v| pano_loss(konst(v, &f), v))?;

    let cam = CameraIntrinsics::new(r.gen_range(150.0..250.0), r.gen_range(150.0..250.0), 128.0, 64.0)?;
    let dp = DecodeParams {
        offset_scale: 8.0,
        depth_prior: 20.0,
        depth_scale: 10.0,
        cos_prior: 1.0,
    };
    let raw = uniform(&mut r, &[10]);
    let rroi = uniform(&mut r, &[4, 5, 5]);
    let w_z = uniform(&mut r, &[4]);
    let gt = Box3D::new(
        [r.gen_range(-5.0..5.0), r.gen_range(0.5..1.5), r.gen_range(10.0..30.0)],
        [r.gen_range(1.0..2.0), r.gen_range(1.0..2.0), r.gen_range(2.0..5.0)],
        r.gen_range(-3.0..3.0),
    )?;
    let loc_px = (r.gen_range(40.0..200.0), r.gen_range(30.0..100.0));
    let gt_px = (loc_px.0 + r.gen_range(-10.0..10.0), loc_px.1 + r.gen_range(-10.0..10.0));
    let attr = r.gen_range(0..2);
    let decode_loss = fix3(|raw_, roi_, wz_| {
        let pred = decode_3d_var(raw_, loc_px, &cam, roi_, wz_, &dp)?;
        let terms = corner_terms_var(&pred, &gt)?;
        let loc = terms.loc.expect("positive depth");
        let ctr = center_offset_loss_var(&pred, loc_px, gt_px, &dp)?;
        let attr_l = attribute_loss_var(pred.attr_logits.expect("two attributes"), attr)?;
        loc.reshape(&[1])?
            .add(terms.dim.reshape(&[1])?)?
            .add(terms.ori.reshape(&[1])?)?
            .add(ctr.reshape(&[1])?)?
            .add(attr_l.reshape(&[1])?)
    });
    g.check("decode_3d_and_corner_loss_raw", seed, &raw, |v| decode_loss(v, konst(v, &rroi), konst(v, &w_z)))?;
    g.check("decode_3d_and_corner_loss_roi", seed, &rroi, |v| decode_loss(konst(v, &raw), v, konst(v, &w_z)))?;
    g.check("decode_3d_and_corner_loss_w_z", seed, &w_z, |v| decode_loss(konst(v, &raw), konst(v, &rroi), v))?;

    let depth = DepthHeadParams {
        convs: vec![
            Conv {
                weight: uniform(&mut r, &[2, 4, 3, 3]),
                bias: Some(uniform(&mut r, &[2])),
            },
            Conv {
                weight: uniform(&mut r, &[1, 2, 3, 3]),
                bias: Some(uniform(&mut r, &[1])),
            },
            Conv {
                weight: uniform(&mut r, &[1, 1, 3, 3]),
                bias: Some(Tensor::full(&[1], 20.0)),
            },
        ],
    };
    let df = uniform(&mut r, &[4, 2, 3]);
    let dgt = Tensor::rand_uniform(&mut r, &[16, 24], 5.0, 40.0);
    let valid: Vec<bool> = (0..16 * 24).map(|_| r.gen_bool(0.8)).collect();
    g.check("depth_head_and_l1_features", seed, &df, |v| {
        depth_l1_var(depth_head_var(v, &depth.constants(v.tape()))?, &dgt, &valid)
    })?;
    g.check("depth_head_and_l1_weight", seed, &depth.convs[1].weight, |wv| {
        let mut p = depth.constants(wv.tape());
        p.convs[1].weight = wv;
        depth_l1_var(depth_head_var(konst(wv, &df), &p)?, &dgt, &valid)
    })?;

    let comps = Tensor::rand_uniform(&mut r, &[9], 0.1, 3.0);
    g.check("total_loss", seed, &comps, |v| {
        let c = |i: usize| Some(v.slice(0, i, i + 1).expect("nine components"));
        let lc = LossComponents {
            fcos: c(0),
            ctr: c(1),
            dim: c(2),
            ori: c(3),
            loc: c(4),
            attr: c(5),
            mask: c(6),
            pano: c(7),
            depth: c(8),
        };
        Ok(total_loss_var(v.tape(), &lc, &LossWeights::default())?.square())
    })?;
    Ok(())
}

/// Finite differences through the whole three-task network with learned
/// routing, one randomly chosen parameter tensor per seed.
fn end_to_end_grads(g: &mut GradSuite, seed: u64) -> Result<()> {
    let scene = gen_scene(4000 + seed, &small_scene_config())?;
    let net = ToyNet::new(NetConfig::tiny(Task::ALL.to_vec(), RoutingMode::Learned), seed)?;
    let targets = SceneTargets::new(&scene, &net.config.branch)?;
    let ids: Vec<_> = net.store.ids().collect();
    let id = ids[rng(seed).gen_range(0..ids.len())];
    let weights = LossWeights::default();
    g.check("toy_network_end_to_end", seed, net.store.get(id), |v| {
        let tape = v.tape();
        let p = net.bind_single(tape, id, v);
        let out = net.forward(tape, &p, &targets)?;
        total_loss_var(tape, &out.losses, &weights)
    })
}

fn gradient_suite() -> Result<Vec<Check>> {
    let mut g = GradSuite { rows: Vec::new() };
    for seed in 0..GRAD_SEEDS {
        primitive_grads(&mut g, seed)?;
        branch_grads(&mut g, seed)?;
        head_grads(&mut g, seed)?;
        end_to_end_grads(&mut g, seed)?;
    }
    Ok(g.rows
        .into_iter()
        .map(|(op, err, seeds, coords)| {
            Check::new(3, format!("grad_{op}"), err, Comparison::Below, GRAD_TOL)
                .with_detail(format!("{seeds} seeds, {coords} coordinates, eps {GRAD_EPS:e}"))
        })
        .collect())
}

fn factored_attention() -> Result<Vec<Check>> {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(5000 + seed);
        let k = 4;
        let d = r.gen_range(2..=8);
        let basis = AttentionBasis {
            u: uniform(&mut r, &[k, ATTENTION_RANK, ATTENTION_SIZE]),
            v: uniform(&mut r, &[k, ATTENTION_RANK, ATTENTION_SIZE]),
        };
        let e = SegEmbedding {
            t: uniform(&mut r, &[k, d]),
            s: uniform(&mut r, &[k, ATTENTION_RANK]),
        };
        let roi = uniform(&mut r, &[d, ATTENTION_SIZE * 4, ATTENTION_SIZE * 4]);
        let got = factored_attention_mask(&roi, &e, &basis)?;
        let want = oracles::materialized_attention_mask(&roi, &e, &basis);
        worst = worst.max(rel_err(&got, &want));
    }
    Ok(vec![
        Check::new(4, "factored_vs_materialized", worst, Comparison::Below, 1e-10).with_detail("20 seeds, K = 4"),
        Check::new(4, "factored_params_per_instance", factored_attention_params(4) as f64, Comparison::Equal, 16.0),
        Check::new(4, "full_params_per_instance", full_attention_params(4) as f64, Comparison::Equal, 784.0),
    ])
}

fn random_camera(r: &mut ChaCha8Rng) -> Result<CameraIntrinsics> {
    CameraIntrinsics::new(
        r.gen_range(100.0..1000.0),
        r.gen_range(100.0..1000.0),
        r.gen_range(0.0..640.0),
        r.gen_range(0.0..360.0),
    )
}

fn random_point(r: &mut ChaCha8Rng) -> [f64; 3] {
    [r.gen_range(-20.0..20.0), r.gen_range(-5.0..5.0), r.gen_range(0.5..80.0)]
}

/// Difference of two pixel pairs relative to their magnitude, floored at 1.
fn px_err(a: (f64, f64), b: (f64, f64)) -> f64 {
    let scale = 1.0f64.max(b.0.abs()).max(b.1.abs());
    (a.0 - b.0).abs().max((a.1 - b.1).abs()) / scale
}

fn geometry() -> Result<Vec<Check>> {
    let mut r = rng(6000);
    let mut worst_round = 0.0f64;
    for _ in 0..1000 {
        let k = random_camera(&mut r)?;
        let p = random_point(&mut r);
        let back = backproject(&k, project(&k, p)?, p[2])?;
        let scale = p.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let err = (0..3).fold(0.0f64, |m, i| m.max((back[i] - p[i]).abs())) / scale;
        let uv = (r.gen_range(0.0..1280.0), r.gen_range(0.0..720.0));
        let uv_back = project(&k, backproject(&k, uv, r.gen_range(0.5..80.0))?)?;
        worst_round = worst_round.max(err).max(px_err(uv_back, uv));
    }
    let mut worst_update = 0.0f64;
    let mut s_range = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let k = random_camera(&mut r)?;
        let p = random_point(&mut r);
        let (w, h) = (r.gen_range(200..1600) as f64, r.gen_range(100..900) as f64);
        let s = r.gen_range(0.5..=1.0);
        let x0 = r.gen_range(0.0..=w * s / 2.0);
        let y0 = r.gen_range(0.0..=h * s / 2.0);
        s_range = (s_range.0.min(s), s_range.1.max(s));
        let (u, v) = project(&k, p)?;
        let lhs = project(&update_intrinsics(&k, s, x0, y0)?, p)?;
        worst_update = worst_update.max(px_err(lhs, (s * u - x0, s * v - y0)));
    }
    let mut worst_crop = 0.0f64;
    for _ in 0..1000 {
        let k = random_camera(&mut r)?;
        let p = random_point(&mut r);
        let crop = relative_crop_params(&mut r, 1280, 720);
        let (u, v) = project(&k, p)?;
        let lhs = project(&update_intrinsics(&k, crop.s, crop.x0, crop.y0)?, p)?;
        worst_crop = worst_crop.max(px_err(lhs, (crop.s * u - crop.x0, crop.s * v - crop.y0)));
    }
    Ok(vec![
        Check::new(5, "project_backproject_round_trip", worst_round, Comparison::Below, 1e-10)
            .with_detail("1000 draws, both directions, relative"),
        Check::new(5, "intrinsics_update_consistency", worst_update, Comparison::Below, 1e-10).with_detail(format!(
            "1000 draws, s in [{:.3}, {:.3}], relative pixel error",
            s_range.0, s_range.1
        )),
        Check::new(5, "relative_crop_consistency", worst_crop, Comparison::Below, 1e-10)
            .with_detail("1000 crops with side ratio in [0.5, 1]"),
    ])
}

fn corner_disentanglement() -> Result<Vec<Check>> {
    let mut violations = 0usize;
    for seed in 0..50 {
        let mut r = rng(7000 + seed);
        let gt = Box3D::new(
            [r.gen_range(-10.0..10.0), r.gen_range(0.0..2.0), r.gen_range(5.0..50.0)],
            [r.gen_range(1.0..2.0), r.gen_range(0.5..2.0), r.gen_range(0.5..5.0)],
            r.gen_range(-3.1..3.1),
        )?;
        let exact = Pred3D {
            center: gt.center,
            dims: gt.dims,
            alpha: yaw_to_alpha(gt.yaw, gt.center),
        };
        for group in 0..3 {
            let mut p = exact;
            let delta = signed(&mut r, &[3], 0.05, 1.0);
            match group {
                0 => (0..3).for_each(|i| p.center[i] += delta.data()[i]),
                1 => (0..3).for_each(|i| p.dims[i] *= 1.0 + 0.3 * delta.data()[i]),
                _ => p.alpha += delta.data()[0],
            }
            let t = corner_terms(&p, &gt);
            let terms = [t.loc, t.dim, t.ori];
            let nonzero = terms.iter().filter(|&&v| v != 0.0).count();
            if nonzero != 1 || terms[group] == 0.0 {
                violations += 1;
            }
        }
    }
    let exact_zero = {
        let gt = Box3D::new([1.5, 0.8, 14.0], [1.5, 1.7, 4.1], 0.4)?;
        let p = Pred3D {
            center: gt.center,
            dims: gt.dims,
            alpha: yaw_to_alpha(gt.yaw, gt.center),
        };
        let t = corner_terms(&p, &gt);
        t.loc + t.dim + t.ori
    };
    Ok(vec![
        Check::new(6, "single_group_perturbations_violating", violations as f64, Comparison::Equal, 0.0)
            .with_detail("50 seeds x {loc, dim, alpha}"),
        Check::new(6, "exact_prediction_terms", exact_zero, Comparison::Equal, 0.0),
    ])
}

/// Sky over ground with up to three rectangular things.
fn random_panoptic(r: &mut ChaCha8Rng, h: usize, w: usize, tax: &Taxonomy) -> Result<PanopticMap> {
    let split = r.gen_range(1..h);
    let mut class: Vec<usize> = (0..h * w).map(|p| if p / w < split { SKY } else { GROUND }).collect();
    let mut inst = vec![0; h * w];
    for id in 1..=r.gen_range(0..=3) {
        let (y, x) = (r.gen_range(0..h), r.gen_range(0..w));
        let (bh, bw) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let c = tax.stuff.len() + r.gen_range(0..tax.things.len());
        for yy in y..(y + bh).min(h) {
            for xx in x..(x + bw).min(w) {
                class[yy * w + xx] = c;
                inst[yy * w + xx] = id;
            }
        }
    }
    PanopticMap::new(h, w, class, inst)
}

fn metrics() -> Result<Vec<Check>> {
    let tax = taxonomy();
    let mut r = rng(8000);
    let mut identity_worst = 0.0f64;
    let mut matcher_worst = 0.0f64;
    for _ in 0..100 {
        let gt = random_panoptic(&mut r, 8, 8, &tax)?;
        let q = panoptic_quality(&gt, &gt, &tax)?;
        identity_worst = identity_worst.max((q.pq - 1.0).abs());
        let pred = random_panoptic(&mut r, 8, 8, &tax)?;
        let q = panoptic_quality(&pred, &gt, &tax)?;
        let (pq, sq, rq) = oracles::panoptic_quality(&pred, &gt, &tax);
        matcher_worst = matcher_worst
            .max((q.pq - pq).abs())
            .max((q.sq - sq).abs())
            .max((q.rq - rq).abs());
    }
    let scene = gen_scene(8001, &SceneConfig::default())?;
    let scene_pq = panoptic_quality(&scene.panoptic, &scene.panoptic, &tax)?.pq;

    let mut depth_worst = 0.0f64;
    for _ in 0..20 {
        let n = r.gen_range(10..400);
        let gt: Vec<f64> = (0..n).map(|_| r.gen_range(0.5..120.0)).collect();
        let pred: Vec<f64> = (0..n).map(|_| r.gen_range(0.5..120.0)).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| r.gen_bool(0.7)).collect();
        valid[0] = true;
        let got = depth_metrics(&pred, &gt, &valid)?;
        let want = oracles::depth_metrics(&pred, &gt, &valid);
        let got = [got.abs_rel, got.delta1, got.delta2, got.delta3, got.rmse];
        for (a, b) in got.iter().zip(want) {
            depth_worst = depth_worst.max((a - b).abs());
        }
    }
    let gt: Vec<f64> = (0..500).map(|_| r.gen_range(0.5..120.0)).collect();
    let scaled: Vec<f64> = gt.iter().map(|g| 1.3 * g).collect();
    let m = depth_metrics(&scaled, &gt, &vec![true; gt.len()])?;

    Ok(vec![
        Check::new(7, "pq_identity_error", identity_worst, Comparison::Equal, 0.0).with_detail("100 random 8x8 maps"),
        Check::new(7, "pq_identity_scene", scene_pq, Comparison::Equal, 1.0),
        Check::new(7, "pq_vs_exhaustive_matcher", matcher_worst, Comparison::Below, 1e-12)
            .with_detail("100 random 8x8 pairs, PQ/SQ/RQ"),
        Check::new(7, "nds_perfect", nds(1.0, &[0.0; 5]), Comparison::Equal, 1.0),
        Check::new(
            7,
            "nds_worked_example_error",
            (nds(0.4, &[0.5, 0.2, 0.1, 0.3, 0.0]) - 0.59).abs(),
            Comparison::Below,
            1e-12,
        )
        .with_detail("mAP 0.4, mTP (0.5, 0.2, 0.1, 0.3, 0.0)"),
        Check::new(7, "depth_metrics_vs_loop_oracle", depth_worst, Comparison::Below, 1e-12)
            .with_detail("20 random masked maps"),
        Check::new(7, "abs_rel_of_1.3x", (m.abs_rel - 0.3).abs(), Comparison::Below, 1e-12),
        Check::new(7, "delta1_of_1.3x", m.delta1, Comparison::Equal, 0.0),
    ])
}

fn loss_weights() -> Result<Vec<Check>> {
    let w = LossWeights::default();
    let constants_ok = (w.lambda_3d, w.alpha, w.beta) == (0.4, 2.0, 0.5);
    let named = |i: usize, v: f64| {
        let mut c = [0.0; 9];
        c[i] = v;
        LossComponents {
            fcos: c[0],
            ctr: c[1],
            dim: c[2],
            ori: c[3],
            loc: c[4],
            attr: c[5],
            mask: c[6],
            pano: c[7],
            depth: c[8],
        }
    };
    let want_coeff = [1.0, 0.4, 0.4 * 2.0, 0.4, 0.4 * 0.5, 0.4, 1.0, 1.0, 1.0];
    let mut mismatches = 0usize;
    for (i, want) in want_coeff.iter().enumerate() {
        if total_loss(&named(i, 1.0), &w)? != *want {
            mismatches += 1;
        }
    }
    let c = LossComponents {
        fcos: 1.25,
        ctr: 0.5,
        dim: 0.75,
        ori: 0.125,
        loc: 3.0,
        attr: 0.625,
        mask: 0.375,
        pano: 1.5,
        depth: 4.0,
    };
    let by_hand = 1.25
        + 0.4 * 0.5
        + 0.4 * 2.0 * 0.75
        + 0.4 * 0.125
        + 0.4 * 0.5 * 3.0
        + 0.4 * 0.625
        + 0.375
        + 1.5
        + 4.0;
    let got = total_loss(&c, &w)?;
    let tape = Tape::new();
    let cv = c.named().map(|(_, v)| Some(tape.constant(Tensor::scalar(*v))));
    let lc = LossComponents {
        fcos: cv[0],
        ctr: cv[1],
        dim: cv[2],
        ori: cv[3],
        loc: cv[4],
        attr: cv[5],
        mask: cv[6],
        pano: cv[7],
        depth: cv[8],
    };
    let got_var = total_loss_var(&tape, &lc, &w)?.item()?;
    Ok(vec![
        Check::new(8, "default_weights", constants_ok as u8 as f64, Comparison::Equal, 1.0)
            .with_detail("lambda_3d 0.4, alpha 2, beta 0.5"),
        Check::new(8, "per_component_coefficient_mismatches", mismatches as f64, Comparison::Equal, 0.0),
        Check::new(8, "combined_error", (got - by_hand).abs(), Comparison::Equal, 0.0),
        Check::new(8, "tape_vs_scalar_error", (got_var - got).abs(), Comparison::Equal, 0.0),
    ])
}

/// One task, one scene, fixed step size: the setting of the monotone
/// overfit criterion.
pub fn overfit_config(task: Task) -> TrainConfig {
    TrainConfig {
        tasks: vec![task],
        steps: OVERFIT_STEPS,
        learning_rate: OVERFIT_LR,
        scenes: 1,
        log_every: OVERFIT_STEPS,
        ..Default::default()
    }
}

pub fn cotrain_config() -> TrainConfig {
    TrainConfig {
        tasks: Task::ALL.to_vec(),
        steps: COTRAIN_STEPS,
        log_every: 25,
        ..Default::default()
    }
}

/// Windows `t` with `loss[t + window] >= loss[t]`.
pub fn non_decreasing_windows(losses: &[f64], window: usize) -> usize {
    (0..losses.len().saturating_sub(window))
        .filter(|&t| !(losses[t + window] < losses[t]))
        .count()
}

/// Routing logs whose extents differ from `tasks × levels × channels`.
pub fn routing_shape_mismatches(report: &TrainReport) -> usize {
    let cfg = &report.config.branch;
    let tasks = report.config.net_config().tasks.len();
    let levels = cfg.num_levels();
    let fits = |s: &Vec<Vec<Vec<f64>>>, channels: usize| {
        s.len() == tasks && s.iter().all(|t| t.len() == levels && t.iter().all(|l| l.len() == channels))
    };
    report
        .routing
        .iter()
        .filter(|log| !(fits(&log.instance, 2 * cfg.dense_width) && fits(&log.dense, cfg.dense_width)))
        .count()
}

fn toy_training() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for task in Task::ALL {
        let report = train_toy(&overfit_config(task), None)?;
        let losses: Vec<f64> = report.trace.iter().map(|r| r.total).collect();
        let bad = non_decreasing_windows(&losses, OVERFIT_WINDOW);
        let first = losses.first().copied().unwrap_or(f64::NAN);
        let last = losses.last().copied().unwrap_or(f64::NAN);
        checks.push(
            Check::new(9, format!("overfit_{task}_non_decreasing_windows"), bad as f64, Comparison::Equal, 0.0)
                .with_detail(format!(
                    "{} steps, window {OVERFIT_WINDOW}, lr {OVERFIT_LR:e}, loss {first:.4} -> {last:.4}",
                    losses.len()
                )),
        );
        checks.push(Check::new(
            9,
            format!("overfit_{task}_steps"),
            losses.len() as f64,
            Comparison::Equal,
            OVERFIT_STEPS as f64,
        ));
    }
    let report = train_toy(&cotrain_config(), None)?;
    let completed = matches!(report.status, TrainStatus::Completed) && report.steps_completed == COTRAIN_STEPS;
    let finite = report
        .trace
        .iter()
        .all(|row| row.total.is_finite() && row.components.named().iter().all(|(_, v)| v.is_finite()));
    let shape = report.routing.first().map(|l| {
        let lvl = l.instance.first().map(|t| (t.len(), t.first().map_or(0, |c| c.len())));
        format!("instance {} x {:?}", l.instance.len(), lvl)
    });
    checks.extend([
        Check::new(9, "cotrain_completed", completed as u8 as f64, Comparison::Equal, 1.0)
            .with_detail(format!("{} of {COTRAIN_STEPS} steps", report.steps_completed)),
        Check::new(9, "cotrain_losses_finite", finite as u8 as f64, Comparison::Equal, 1.0),
        Check::new(9, "cotrain_routing_logs", report.routing.len() as f64, Comparison::AtLeast, 1.0)
            .with_detail(shape.unwrap_or_default()),
        Check::new(9, "cotrain_routing_shape_mismatches", routing_shape_mismatches(&report) as f64, Comparison::Equal, 0.0)
            .with_detail("tasks x levels x channels"),
    ]);
    Ok(checks)
}

fn performance() -> Result<Vec<Check>> {
    let report = bench_dr1conv(&BenchConfig::default())?;
    Ok(bench_checks(&report))
}

pub fn bench_checks(report: &BenchReport) -> Vec<Check> {
    let c = &report.config;
    vec![
        Check::new(10, "dr1conv_speedup", report.speedup, Comparison::AtLeast, 5.0).with_detail(format!(
            "C={}, {}x{}, {}x{} kernel, {} repeats, median {:.4}s vs {:.4}s",
            c.channels, c.height, c.width, c.kernel, c.kernel, c.repeats, report.rows[0].median_s, report.rows[1].median_s
        )),
        Check::new(10, "bench_outputs_agree", report.max_abs_diff, Comparison::Below, 1e-9),
    ]
}

fn harness_invariants() -> Result<Vec<Check>> {
    let cfg = SceneConfig::default();
    let same = (0..5).all(|s| match (gen_scene(s, &cfg), gen_scene(s, &cfg)) {
        (Ok(a), Ok(b)) => a.to_bytes() == b.to_bytes(),
        _ => false,
    });
    let empty = gen_scene(
        1,
        &SceneConfig {
            min_objects: 0,
            max_objects: 0,
            ..cfg.clone()
        },
    )?;
    let pure_stuff = empty.objects.is_empty()
        && empty.panoptic.instance.iter().all(|&i| i == 0)
        && empty.panoptic.class.iter().all(|&c| c == SKY || c == GROUND);
    let mut outside = 0usize;
    let mut bad_depth = 0usize;
    for seed in 0..1000 {
        let s = gen_scene(seed, &cfg)?;
        for o in &s.objects {
            for corner in box_corners(&o.box3d) {
                let (u, v) = project(&s.intrinsics, corner)?;
                if !(u >= 0.0 && v >= 0.0 && u < cfg.width as f64 && v < cfg.height as f64) {
                    outside += 1;
                }
            }
        }
        bad_depth += s
            .depth
            .data()
            .iter()
            .filter(|&&d| !(d > 0.0 && d <= crate::heads::MAX_DEPTH))
            .count();
    }

    let short = |routing| TrainConfig {
        steps: 15,
        scenes: 2,
        routing,
        ..Default::default()
    };
    let a = train_toy(&short(RoutingMode::Learned), None)?;
    let b = train_toy(&short(RoutingMode::Learned), None)?;
    let bits = |r: &TrainReport| -> Vec<u64> {
        r.trace
            .iter()
            .flat_map(|row| std::iter::once(row.total).chain(row.components.named().map(|(_, v)| *v)))
            .map(f64::to_bits)
            .collect()
    };
    let deterministic = bits(&a) == bits(&b) && a.routing == b.routing;
    let frozen = train_toy(&short(RoutingMode::PassThrough), None)?;
    let disabled = train_toy(&short(RoutingMode::Disabled), None)?;
    let totals = |r: &TrainReport| r.trace.iter().map(|row| row.total).collect::<Vec<_>>();
    let trace_diff = max_diff(&totals(&frozen), &totals(&disabled));

    let small = bench_dr1conv(&BenchConfig {
        channels: 4,
        height: 8,
        width: 8,
        repeats: 1,
        ..Default::default()
    })?;
    let bench_json = serde_json::to_string(&small)?;
    let bench_ok = small.rows.len() == 2
        && small.rows.iter().all(|r| r.samples_s.len() == 1)
        && serde_json::from_str::<BenchReport>(&bench_json)? == small;

    Ok(vec![
        Check::new(0, "scene_same_seed_same_bytes", same as u8 as f64, Comparison::Equal, 1.0),
        Check::new(0, "scene_zero_objects_pure_stuff", pure_stuff as u8 as f64, Comparison::Equal, 1.0),
        Check::new(0, "scene_corners_outside_image", outside as f64, Comparison::Equal, 0.0).with_detail("1000 seeds"),
        Check::new(0, "scene_depth_out_of_range", bad_depth as f64, Comparison::Equal, 0.0).with_detail("1000 seeds"),
        Check::new(0, "train_bit_identical_rerun", deterministic as u8 as f64, Comparison::Equal, 1.0),
        Check::new(0, "pass_through_vs_disabled_trace", trace_diff, Comparison::AtMost, 1e-9)
            .with_detail(format!("{} steps", frozen.trace.len())),
        Check::new(0, "bench_single_repeat_schema", bench_ok as u8 as f64, Comparison::Equal, 1.0),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_values_fail_and_serialize() {
        let c = Check::new(3, "x", f64::NAN, Comparison::Below, 1.0);
        assert!(!c.passed);
        assert_eq!(c.value, f64::MAX);
        let inf = Check::new(10, "y", f64::INFINITY, Comparison::AtLeast, 5.0);
        assert!(!inf.passed);
        let report = VerifyReport {
            passed: false,
            seconds: 0.5,
            checks: vec![c, inf, Check::new(1, "z", 0.0, Comparison::Equal, 0.0)],
        };
        let back: VerifyReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.failures().count(), 2);
        assert!(back.criterion_passed(1) && !back.criterion_passed(3));
    }

    #[test]
    fn comparisons_are_strict_where_named() {
        assert!(!Comparison::Below.holds(1.0, 1.0));
        assert!(Comparison::AtMost.holds(1.0, 1.0));
        assert!(Comparison::AtLeast.holds(5.0, 5.0));
        assert!(!Comparison::Equal.holds(1e-300, 0.0));
        let line = Check::new(7, "nds", 1.0, Comparison::Equal, 1.0).with_detail("d").to_string();
        assert_eq!(line, "PASS [7] nds: 1.000000e0 == 1.000000e0 (d)");
    }

    #[test]
    fn window_counter_flags_plateaus() {
        let falling: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
        assert_eq!(non_decreasing_windows(&falling, 3), 0);
        let mut flat = falling.clone();
        flat[7] = flat[4];
        assert_eq!(non_decreasing_windows(&flat, 3), 1);
        assert_eq!(non_decreasing_windows(&[1.0, f64::NAN], 1), 1);
        assert_eq!(non_decreasing_windows(&falling, 20), 0);
    }

    #[test]
    fn sign_flip_breaks_rank1_equivalence() {
        let opts = VerifyOptions {
            flip_dr1conv_sign: true,
            criteria: vec![1],
        };
        let report = run_verification(&opts).unwrap();
        assert!(!report.passed);
        assert!(run_verification(&VerifyOptions { criteria: vec![1], ..Default::default() }).unwrap().passed);
    }

    #[test]
    fn unknown_criterion_fails() {
        assert!(run_criterion(11, &VerifyOptions::default()).iter().any(|c| !c.passed));
    }
}
