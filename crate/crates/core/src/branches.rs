//! The two-branch skeleton.
//!
//! The instance branch runs a shared tower and a top convolution over every
//! pyramid level, producing per-task context maps `M` (split into rank-1
//! factors) and an embedding map `E`. The dense branch folds the pyramid
//! from the coarsest level down, merging each level through a DR1Conv
//! driven by those factors, and emits one stride-8 basis map per task.
//!
//! Grid convention: location `(i, j)` on level `l` sits on image pixel
//! `(2^l·i, 2^l·j)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamic_ops::{dr1conv_var, DR1ConvLayer, Rank1Factors};
use crate::error::{arg_err, shape_err, Result};
use crate::heads::EmbeddingLayout;
use crate::numerics::{Bound, Conv, ParamId, ParamStore, Tape, Tensor, Var};
use crate::routing::{
    route_tasks_var, split_context_var, task_router_var, RouterParams, RouterShape, RoutingMode, RoutingScores,
    TaskEmbedder,
};

/// `(x1, y1, x2, y2)` in image pixels.
pub type Box2D = [f64; 4];

/// Side of the square RoI crop.
pub const ROI_SIZE: usize = 56;
/// Stride of the dense basis map.
pub const BASIS_STRIDE: usize = 8;
/// Longest-side upper bounds for levels 3..=6; anything larger goes to 7.
pub const LEVEL_BOUNDS: [f64; 4] = [64.0, 128.0, 256.0, 512.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchConfig {
    /// Pyramid and tower width `C`.
    pub channels: usize,
    pub tower_depth: usize,
    pub min_level: usize,
    pub max_level: usize,
    /// Dense basis width `D′`.
    pub dense_width: usize,
    /// Attention bases `K`.
    pub attention_bases: usize,
    /// Width of the embedding map `E`.
    pub embed_channels: usize,
    pub size_divisibility: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            tower_depth: 2,
            min_level: 3,
            max_level: 7,
            dense_width: 64,
            attention_bases: 4,
            embed_channels: EmbeddingLayout::new(64, 4, 0).width(),
            size_divisibility: 4,
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 8 != 0 {
            return Err(arg_err("BranchConfig", format!("C = {} must be a positive multiple of 8", self.channels)));
        }
        if self.dense_width < self.attention_bases || self.attention_bases == 0 {
            return Err(arg_err(
                "BranchConfig",
                format!("D′ = {} must be at least K = {}", self.dense_width, self.attention_bases),
            ));
        }
        if self.min_level == 0 || self.min_level > self.max_level || self.max_level > 12 {
            return Err(arg_err(
                "BranchConfig",
                format!("bad level range {}..={}", self.min_level, self.max_level),
            ));
        }
        if self.size_divisibility == 0 {
            return Err(arg_err("BranchConfig", "size divisibility must be positive"));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.max_level - self.min_level + 1
    }

    /// Channels of `M_l` for `tasks` tasks: `2D′` per task.
    pub fn context_channels(&self, tasks: usize) -> usize {
        2 * self.dense_width * tasks
    }
}

/// FPN outputs `P_l` for consecutive levels starting at `min_level`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    min_level: usize,
    levels: Vec<Tensor>,
}

/// Checks the halving and uniform-width invariants over level shapes.
pub fn check_pyramid_shapes(shapes: &[Vec<usize>]) -> Result<()> {
    let first = shapes.first().ok_or_else(|| arg_err("FeaturePyramid", "no levels"))?;
    if first.len() != 3 {
        return Err(shape_err("FeaturePyramid", format!("level shape {first:?} is not C×H×W")));
    }
    for pair in shapes.windows(2) {
        let (fine, coarse) = (&pair[0], &pair[1]);
        if coarse.len() != 3 || coarse[0] != fine[0] || coarse[1] != fine[1].div_ceil(2) || coarse[2] != fine[2].div_ceil(2)
        {
            return Err(shape_err(
                "FeaturePyramid",
                format!("{coarse:?} is not the ceil-half of {fine:?}"),
            ));
        }
    }
    Ok(())
}

impl FeaturePyramid {
    pub fn new(min_level: usize, levels: Vec<Tensor>) -> Result<Self> {
        check_pyramid_shapes(&levels.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>())?;
        Ok(Self { min_level, levels })
    }

    pub fn min_level(&self) -> usize {
        self.min_level
    }

    pub fn max_level(&self) -> usize {
        self.min_level + self.levels.len() - 1
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> Option<&Tensor> {
        l.checked_sub(self.min_level).and_then(|i| self.levels.get(i))
    }

    pub fn stride(l: usize) -> usize {
        1 << l
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[0]
    }

    /// `(H_l, W_l)` per level.
    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|t| (t.shape()[1], t.shape()[2])).collect()
    }
}

/// Box tower followed by the top layer, shared across levels.
#[derive(Clone, Debug)]
pub struct InstanceBranchParams<T = Tensor> {
    pub tower: Vec<Conv<T>>,
    pub top: Conv<T>,
}

impl<T> InstanceBranchParams<T> {
    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> InstanceBranchParams<U> {
        InstanceBranchParams {
            tower: self.tower.iter().map(|c| c.map(&f)).collect(),
            top: self.top.map(&f),
        }
    }
}

impl InstanceBranchParams<ParamId> {
    /// The top layer's context channels start at bias 1, so the factors
    /// begin near the identity modulation.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &BranchConfig,
        num_tasks: usize,
    ) -> Self {
        let c = cfg.channels;
        let tower = (0..cfg.tower_depth)
            .map(|i| Conv::init(store, rng, &format!("instance.tower{i}"), c, c, 3, Some(0.0)))
            .collect();
        let m = cfg.context_channels(num_tasks);
        let top = Conv::init(store, rng, "instance.top", m + cfg.embed_channels, c, 3, Some(0.0));
        let bias = store.get_mut(top.bias.expect("top has a bias"));
        bias.data_mut()[..m].iter_mut().for_each(|v| *v = 1.0);
        Self { tower, top }
    }

    pub fn bind<'t>(&self, b: &Bound<'t>) -> InstanceBranchParams<Var<'t>> {
        self.map(|&id| b[id])
    }
}

impl InstanceBranchParams<Tensor> {
    pub fn constants<'t>(&self, tape: &'t Tape) -> InstanceBranchParams<Var<'t>> {
        self.map(|t| tape.constant(t.clone()))
    }
}

/// Outputs of the instance branch at one level.
#[derive(Clone, Debug)]
pub struct InstanceLevel<T = Tensor> {
    /// Tower output, the router input.
    pub tower: T,
    /// Context maps of every task, `T·2D′` channels.
    pub m: T,
    /// Embedding map.
    pub e: T,
}

/// `{M_l, E_l} = Top(Tower(P_l))`; the tower is `conv3×3 + ReLU` blocks.
pub fn instance_level_var<'t>(
    p: Var<'t>,
    params: &InstanceBranchParams<Var<'t>>,
    embed_channels: usize,
) -> Result<InstanceLevel<Var<'t>>> {
    let mut x = p;
    for conv in &params.tower {
        x = conv.forward(x, 1)?.relu();
    }
    let top = params.top.forward(x, 1)?;
    let total = top.shape()[0];
    if embed_channels > total {
        return Err(shape_err(
            "instance_branch",
            format!("top emits {total} channels, fewer than E = {embed_channels}"),
        ));
    }
    let split = total - embed_channels;
    Ok(InstanceLevel {
        tower: x,
        m: top.slice(0, 0, split)?,
        e: top.slice(0, split, total)?,
    })
}

pub fn instance_branch_forward(
    pyr: &FeaturePyramid,
    params: &InstanceBranchParams,
    cfg: &BranchConfig,
) -> Result<Vec<InstanceLevel>> {
    let tape = Tape::new();
    let p = params.constants(&tape);
    pyr.levels()
        .iter()
        .map(|lvl| {
            let out = instance_level_var(tape.constant(lvl.clone()), &p, cfg.embed_channels)?;
            Ok(InstanceLevel {
                tower: out.tower.tensor(),
                m: out.m.tensor(),
                e: out.e.tensor(),
            })
        })
        .collect()
}

/// Splits `M_l` (`2C′×H×W`) into the factors `(A_l, B_l)`.
pub fn split_dynamic_tensors(m: &Tensor) -> Result<Rank1Factors> {
    let tape = Tape::new();
    let f = split_dynamic_tensors_var(tape.constant(m.clone()))?;
    Rank1Factors::new(f.a.tensor(), f.b.tensor())
}

pub fn split_dynamic_tensors_var<'t>(m: Var<'t>) -> Result<Rank1Factors<Var<'t>>> {
    let (a, b) = split_context_var(m)?;
    Ok(Rank1Factors { a, b })
}

/// Router weights of one branch: a task embedder shared by all levels and
/// one router per level.
#[derive(Clone, Debug)]
pub struct BranchRouting<T = Tensor> {
    pub embedder: TaskEmbedder<T>,
    pub routers: Vec<RouterParams<T>>,
}

impl<T> BranchRouting<T> {
    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> BranchRouting<U> {
        BranchRouting {
            embedder: TaskEmbedder {
                weight: f(&self.embedder.weight),
            },
            routers: self.routers.iter().map(|r| r.map(&f)).collect(),
        }
    }
}

impl BranchRouting<ParamId> {
    /// Zero routers (neutral scores) and uniform `[-1, 1)` task embeddings.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        levels: usize,
        in_channels: usize,
        routed: usize,
        num_tasks: usize,
    ) -> Result<Self> {
        let shape = RouterShape::task_aware(in_channels, routed)?;
        let embedder = TaskEmbedder {
            weight: store.add(
                format!("{name}.task_embedding"),
                Tensor::rand_uniform(rng, &[shape.emb_width, num_tasks], -1.0, 1.0),
            ),
        };
        let routers = (0..levels)
            .map(|l| {
                let z = RouterParams::zeros(shape);
                RouterParams {
                    weight: store.add(format!("{name}.router{l}.weight"), z.weight),
                    bias: store.add(format!("{name}.router{l}.bias"), z.bias),
                }
            })
            .collect();
        Ok(Self { embedder, routers })
    }

    pub fn bind<'t>(&self, b: &Bound<'t>) -> BranchRouting<Var<'t>> {
        self.map(|&id| b[id])
    }
}

/// Routes every task's features against every other task at one level.
///
/// `secondary(t, s)` yields the features task `t` borrows from task `s`.
/// Returns the routed features and, per task, its primary scores averaged
/// over its pairs (empty when nothing is routed).
pub fn route_level_var<'t>(
    mode: RoutingMode,
    router: Option<(&TaskEmbedder<Var<'t>>, &RouterParams<Var<'t>>)>,
    router_inputs: &[Var<'t>],
    own: &[Var<'t>],
    secondary: &dyn Fn(usize, usize) -> Result<Var<'t>>,
) -> Result<(Vec<Var<'t>>, Vec<Tensor>)> {
    let tasks = own.len();
    if tasks < 2 || mode == RoutingMode::Disabled {
        return Ok((own.to_vec(), Vec::new()));
    }
    let tape = own[0].tape();
    let mut routed = Vec::with_capacity(tasks);
    let mut logged = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let c = own[t].shape()[0];
        let mut features = Vec::with_capacity(tasks);
        let mut pairs = Vec::with_capacity(tasks - 1);
        for s in 0..tasks {
            if s == t {
                features.push(own[t]);
                continue;
            }
            features.push(secondary(t, s)?);
            let scores = match (mode, router) {
                (RoutingMode::PassThrough, _) => RoutingScores::pass_through(c).constants(tape),
                (RoutingMode::Learned, Some((emb, params))) => {
                    task_router_var(router_inputs[t], emb.embed(t)?, emb.embed(s)?, params)?
                }
                _ => return Err(arg_err("route_level", "learned routing needs router parameters")),
            };
            pairs.push((s, scores));
        }
        let mut mean = vec![0.0; c];
        for (_, sc) in &pairs {
            for (m, v) in mean.iter_mut().zip(sc.primary.value().data()) {
                *m += v / pairs.len() as f64;
            }
        }
        logged.push(Tensor::from_vec(mean));
        routed.push(route_tasks_var(&features, t, &pairs)?);
    }
    Ok((routed, logged))
}

/// Instance branch over all levels with per-task routed factors.
pub struct InstanceOutput<'t> {
    pub levels: Vec<InstanceLevel<Var<'t>>>,
    /// `factors[task][level]`.
    pub factors: Vec<Vec<Rank1Factors<Var<'t>>>>,
    /// `scores[level][task]`, empty per level when unrouted.
    pub scores: Vec<Vec<Tensor>>,
}

pub fn instance_branch_forward_var<'t>(
    pyramid: &[Var<'t>],
    params: &InstanceBranchParams<Var<'t>>,
    cfg: &BranchConfig,
    num_tasks: usize,
    mode: RoutingMode,
    routing: Option<&BranchRouting<Var<'t>>>,
) -> Result<InstanceOutput<'t>> {
    let width = 2 * cfg.dense_width;
    let mut levels = Vec::with_capacity(pyramid.len());
    let mut factors: Vec<Vec<Rank1Factors<Var<'t>>>> = (0..num_tasks).map(|_| Vec::new()).collect();
    let mut scores = Vec::with_capacity(pyramid.len());
    for (li, &p) in pyramid.iter().enumerate() {
        let out = instance_level_var(p, params, cfg.embed_channels)?;
        if out.m.shape()[0] != width * num_tasks {
            return Err(shape_err(
                "instance_branch",
                format!("M has {} channels, expected {}", out.m.shape()[0], width * num_tasks),
            ));
        }
        let own: Vec<Var<'t>> = (0..num_tasks)
            .map(|t| out.m.slice(0, t * width, (t + 1) * width))
            .collect::<Result<_>>()?;
        let router = routing.map(|r| (&r.embedder, &r.routers[li]));
        let inputs = vec![out.tower; num_tasks];
        let (routed, logged) = route_level_var(mode, router, &inputs, &own, &|_, s| Ok(own[s]))?;
        for (t, m) in routed.into_iter().enumerate() {
            factors[t].push(split_dynamic_tensors_var(m)?);
        }
        scores.push(logged);
        levels.push(out);
    }
    Ok(InstanceOutput { levels, factors, scores })
}

/// Lateral reductions shared across tasks plus per-task DR1Conv layers.
#[derive(Clone, Debug)]
pub struct DenseBranchParams<T = Tensor> {
    /// Per-level `D′×C×3×3` reductions.
    pub reduce: Vec<Conv<T>>,
    /// `layers[task][level]`, each `D′×D′×3×3`.
    pub layers: Vec<Vec<DR1ConvLayer<T>>>,
}

impl<T> DenseBranchParams<T> {
    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> DenseBranchParams<U> {
        DenseBranchParams {
            reduce: self.reduce.iter().map(|c| c.map(&f)).collect(),
            layers: self
                .layers
                .iter()
                .map(|ls| ls.iter().map(|l| l.map(&f)).collect())
                .collect(),
        }
    }
}

impl DenseBranchParams<ParamId> {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &BranchConfig, num_tasks: usize) -> Self {
        let (c, d) = (cfg.channels, cfg.dense_width);
        let reduce = (0..cfg.num_levels())
            .map(|l| Conv::init(store, rng, &format!("dense.reduce{l}"), d, c, 3, Some(0.0)))
            .collect();
        let layers = (0..num_tasks)
            .map(|t| {
                (0..cfg.num_levels())
                    .map(|l| DR1ConvLayer {
                        conv: Conv::init(store, rng, &format!("dense.task{t}.dr1_{l}"), d, d, 3, None),
                    })
                    .collect()
            })
            .collect();
        Self { reduce, layers }
    }

    pub fn bind<'t>(&self, b: &Bound<'t>) -> DenseBranchParams<Var<'t>> {
        self.map(|&id| b[id])
    }
}

impl DenseBranchParams<Tensor> {
    pub fn constants<'t>(&self, tape: &'t Tape) -> DenseBranchParams<Var<'t>> {
        self.map(|t| tape.constant(t.clone()))
    }
}

pub struct DenseOutput<'t> {
    /// Stride-8 basis map per task.
    pub basis: Vec<Var<'t>>,
    /// `scores[level][task]`, empty per level when unrouted.
    pub scores: Vec<Vec<Tensor>>,
}

/// Inverted-pyramid fold from the coarsest level down to the finest:
/// `X^t_l = Conv3×3(P_l) + up2(F^t_{l+1})`, `F^t_l = DR1Conv(X^t_l)` with
/// task `t`'s factors, then routed across tasks. The secondary projection
/// for `(t, s)` applies task `s`'s static kernel to `X^t_l`.
pub fn dense_branch_forward_var<'t>(
    pyramid: &[Var<'t>],
    factors: &[Vec<Rank1Factors<Var<'t>>>],
    params: &DenseBranchParams<Var<'t>>,
    mode: RoutingMode,
    routing: Option<&BranchRouting<Var<'t>>>,
) -> Result<DenseOutput<'t>> {
    let tasks = params.layers.len();
    let n = pyramid.len();
    if factors.len() != tasks || params.reduce.len() != n || factors.iter().any(|f| f.len() != n) {
        return Err(shape_err(
            "dense_branch",
            format!("{n} levels and {tasks} tasks do not match the factor and parameter lists"),
        ));
    }
    if params.layers.iter().any(|l| l.len() != n) {
        return Err(shape_err("dense_branch", "every task needs one DR1Conv per level"));
    }
    let mut above: Option<Vec<Var<'t>>> = None;
    let mut scores = vec![Vec::new(); n];
    for li in (0..n).rev() {
        let reduced = params.reduce[li].forward(pyramid[li], 1)?;
        let rs = reduced.shape();
        let inputs: Vec<Var<'t>> = match &above {
            Some(prev) => prev
                .iter()
                .map(|f| {
                    let fs = f.shape();
                    if fs[0] != rs[0] || fs[1] != rs[1].div_ceil(2) || fs[2] != rs[2].div_ceil(2) {
                        return Err(shape_err(
                            "dense_branch",
                            format!("coarser map {fs:?} is not half of {rs:?}"),
                        ));
                    }
                    reduced.add(f.upsample_aligned(2)?.crop_hw(rs[1], rs[2])?)
                })
                .collect::<Result<_>>()?,
            None => vec![reduced; tasks],
        };
        let own: Vec<Var<'t>> = (0..tasks)
            .map(|t| dr1conv_var(inputs[t], &factors[t][li], &params.layers[t][li]))
            .collect::<Result<_>>()?;
        let router = routing.map(|r| (&r.embedder, &r.routers[li]));
        let secondary = |t: usize, s: usize| dr1conv_var(inputs[t], &factors[t][li], &params.layers[s][li]);
        let (routed, logged) = route_level_var(mode, router, &inputs, &own, &secondary)?;
        scores[li] = logged;
        above = Some(routed);
    }
    Ok(DenseOutput {
        basis: above.expect("at least one level"),
        scores,
    })
}

/// Single-task dense branch: returns `F = F_{min_level}`.
pub fn dense_branch_forward(
    pyr: &FeaturePyramid,
    factors: &[Rank1Factors],
    params: &DenseBranchParams,
) -> Result<Tensor> {
    if params.layers.len() != 1 {
        return Err(arg_err("dense_branch_forward", "expects parameters for exactly one task"));
    }
    let tape = Tape::new();
    let levels: Vec<Var<'_>> = pyr.levels().iter().map(|t| tape.constant(t.clone())).collect();
    let f: Vec<Rank1Factors<Var<'_>>> = factors.iter().map(|f| f.constants(&tape)).collect();
    let out = dense_branch_forward_var(&levels, &[f], &params.constants(&tape), RoutingMode::Disabled, None)?;
    Ok(out.basis[0].tensor())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub box2d: Box2D,
    pub class_id: usize,
}

/// One positive location.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Assignment {
    pub level: usize,
    pub location: (usize, usize),
    /// Index into the ground-truth list.
    pub instance: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceProposal {
    pub embedding: Vec<f64>,
    pub box2d: Box2D,
    pub class_id: usize,
    pub level: usize,
    pub location: (usize, usize),
    pub instance: usize,
}

fn box_valid(b: &Box2D) -> bool {
    b.iter().all(|v| v.is_finite()) && b[2] > b[0] && b[3] > b[1]
}

fn box_area(b: &Box2D) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// Level whose size range covers the longest side, clamped to the
/// available levels. Sides on a bound go to the lower level.
pub fn level_for_box(b: &Box2D, min_level: usize, max_level: usize) -> usize {
    let side = (b[2] - b[0]).max(b[3] - b[1]);
    let l = 3 + LEVEL_BOUNDS.iter().take_while(|&&bound| side > bound).count();
    l.clamp(min_level, max_level)
}

/// Positive locations: on the box's level, every location inside the
/// central half of the box plus the location nearest the box center.
/// A location claimed by several boxes goes to the smallest one (lowest
/// index on ties). Output is sorted by `(level, location)`.
pub fn assign_locations(dims: &[(usize, usize)], min_level: usize, gts: &[GtInstance]) -> Result<Vec<Assignment>> {
    if dims.is_empty() {
        return Err(arg_err("assign_locations", "no pyramid levels"));
    }
    let max_level = min_level + dims.len() - 1;
    let mut claims: Vec<Vec<Option<usize>>> = dims.iter().map(|&(h, w)| vec![None; h * w]).collect();
    for (k, gt) in gts.iter().enumerate() {
        let b = &gt.box2d;
        if !box_valid(b) {
            return Err(arg_err("assign_locations", format!("degenerate box {b:?}")));
        }
        let l = level_for_box(b, min_level, max_level);
        let (h, w) = dims[l - min_level];
        let s = (1usize << l) as f64;
        let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
        let (rx, ry) = ((b[2] - b[0]) / 4.0, (b[3] - b[1]) / 4.0);
        let range = |c: f64, r: f64, n: usize| {
            let lo = ((c - r) / s).ceil().max(0.0) as usize;
            let hi = ((c + r) / s).floor();
            let hi = if hi < 0.0 { None } else { Some((hi as usize).min(n - 1)) };
            (lo, hi)
        };
        let mut cells = Vec::new();
        if let ((r0, Some(r1)), (c0, Some(c1))) = (range(cy, ry, h), range(cx, rx, w)) {
            for i in r0..=r1 {
                for j in c0..=c1 {
                    cells.push((i, j));
                }
            }
        }
        let nearest = |c: f64, n: usize| ((c / s).round().max(0.0) as usize).min(n - 1);
        let center = (nearest(cy, h), nearest(cx, w));
        if !cells.contains(&center) {
            cells.push(center);
        }
        let grid = &mut claims[l - min_level];
        for (i, j) in cells {
            let slot = &mut grid[i * w + j];
            match *slot {
                Some(prev) if box_area(&gts[prev].box2d) <= box_area(b) => {}
                _ => *slot = Some(k),
            }
        }
    }
    let mut out = Vec::new();
    for (li, grid) in claims.iter().enumerate() {
        let w = dims[li].1;
        for (idx, owner) in grid.iter().enumerate() {
            if let Some(instance) = owner {
                out.push(Assignment {
                    level: min_level + li,
                    location: (idx / w, idx % w),
                    instance: *instance,
                });
            }
        }
    }
    Ok(out)
}

/// Reads each positive location's embedding from its level's `E_l`.
pub fn assign_and_filter(e_levels: &[Tensor], min_level: usize, gts: &[GtInstance]) -> Result<Vec<InstanceProposal>> {
    let mut dims = Vec::with_capacity(e_levels.len());
    for e in e_levels {
        let (_, h, w) = e.dims3()?;
        dims.push((h, w));
    }
    let assigned = assign_locations(&dims, min_level, gts)?;
    Ok(assigned
        .into_iter()
        .map(|a| {
            let e = &e_levels[a.level - min_level];
            let c = e.shape()[0];
            let (i, j) = a.location;
            let gt = &gts[a.instance];
            InstanceProposal {
                embedding: (0..c).map(|ch| e.at3(ch, i, j)).collect(),
                box2d: gt.box2d,
                class_id: gt.class_id,
                level: a.level,
                location: a.location,
                instance: a.instance,
            }
        })
        .collect())
}

/// Gathers the embedding vector at `location` of a `C×H×W` embedding map.
pub fn embedding_at_var<'t>(e: Var<'t>, location: (usize, usize)) -> Result<Var<'t>> {
    let s = e.shape();
    let [c, h, w] = s[..] else {
        return Err(shape_err("embedding_at", format!("expected C×H×W, got {s:?}")));
    };
    let (i, j) = location;
    if i >= h || j >= w {
        return Err(shape_err("embedding_at", format!("{location:?} outside {h}×{w}")));
    }
    e.gather((0..c).map(|ch| (ch * h + i) * w + j).collect(), &[c])
}

/// Sample centers of an `out×out` grid of equal sub-cells of `box2d`, in
/// `(y, x)` feature coordinates of a map with the given stride.
pub fn roi_sample_points(box2d: &Box2D, out: usize, stride: f64) -> Result<Vec<(f64, f64)>> {
    if !box_valid(box2d) || out == 0 {
        return Err(arg_err("crop_roi", format!("degenerate box {box2d:?}")));
    }
    let [x1, y1, x2, y2] = *box2d;
    let (bw, bh) = ((x2 - x1) / out as f64, (y2 - y1) / out as f64);
    let mut pts = Vec::with_capacity(out * out);
    for a in 0..out {
        for b in 0..out {
            let y = y1 + (a as f64 + 0.5) * bh;
            let x = x1 + (b as f64 + 0.5) * bw;
            pts.push((y / stride, x / stride));
        }
    }
    Ok(pts)
}

/// Bilinear RoI crop of a stride-8 map, one sample per sub-cell.
pub fn crop_roi_var<'t>(f: Var<'t>, box2d: &Box2D, out: usize) -> Result<Var<'t>> {
    let pts = roi_sample_points(box2d, out, BASIS_STRIDE as f64)?;
    f.sample_bilinear(&pts, out, out)
}

pub fn crop_roi(f: &Tensor, box2d: &Box2D, out: usize) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(crop_roi_var(tape.constant(f.clone()), box2d, out)?.tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Conv;
    use crate::oracles;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(e: usize) -> BranchConfig {
        BranchConfig {
            channels: 8,
            tower_depth: 2,
            min_level: 3,
            max_level: 4,
            dense_width: 4,
            attention_bases: 2,
            embed_channels: e,
            size_divisibility: 4,
        }
    }

    fn pyramid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, n: usize) -> FeaturePyramid {
        let mut levels = Vec::new();
        let (mut h, mut w) = (h, w);
        for _ in 0..n {
            levels.push(Tensor::rand_uniform(rng, &[c, h, w], -1.0, 1.0));
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        FeaturePyramid::new(3, levels).unwrap()
    }

    fn eager_instance_params(rng: &mut ChaCha8Rng, cfg: &BranchConfig, tasks: usize) -> InstanceBranchParams {
        let mut store = ParamStore::new();
        let ids = InstanceBranchParams::init(&mut store, rng, cfg, tasks);
        let p = ids.map(|&id| store.get(id).clone());
        p.map(|t| t.map(|v| v + 0.01))
    }

    #[test]
    fn pyramid_rejects_bad_halving() {
        let a = Tensor::zeros(&[2, 5, 7]);
        assert!(FeaturePyramid::new(3, vec![a.clone(), Tensor::zeros(&[2, 3, 4])]).is_ok());
        assert!(FeaturePyramid::new(3, vec![a.clone(), Tensor::zeros(&[2, 2, 4])]).is_err());
        assert!(FeaturePyramid::new(3, vec![a, Tensor::zeros(&[3, 3, 4])]).is_err());
    }

    #[test]
    fn zero_weights_give_bias_constants() {
        let cfg = small_cfg(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pyr = pyramid(&mut rng, 8, 6, 10, 2);
        let mut p = eager_instance_params(&mut rng, &cfg, 1);
        p = p.map(|t| Tensor::zeros(t.shape()));
        let outs = instance_branch_forward(&pyr, &p, &cfg).unwrap();
        for o in outs {
            assert!(o.m.data().iter().chain(o.e.data()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn default_shapes() {
        let cfg = BranchConfig {
            embed_channels: 16,
            ..BranchConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = eager_instance_params(&mut rng, &cfg, 1);
        let pyr = FeaturePyramid::new(3, vec![Tensor::zeros(&[64, 32, 64])]).unwrap();
        let out = instance_branch_forward(&pyr, &p, &cfg).unwrap();
        assert_eq!(out[0].m.shape(), &[128, 32, 64]);
        assert_eq!(out[0].e.shape(), &[16, 32, 64]);
    }

    #[test]
    fn instance_branch_matches_transcription() {
        let cfg = small_cfg(5);
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pyr = pyramid(&mut rng, 8, 7, 9, 2);
            let p = eager_instance_params(&mut rng, &cfg, 2);
            let got = instance_branch_forward(&pyr, &p, &cfg).unwrap();
            for (lvl, g) in pyr.levels().iter().zip(&got) {
                let (m, e) = oracles::instance_level(lvl, &p, cfg.embed_channels);
                assert!(g.m.max_abs_diff(&m) < 1e-12);
                assert!(g.e.max_abs_diff(&e) < 1e-12);
            }
        }
    }

    #[test]
    fn split_matches_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Tensor::rand_uniform(&mut rng, &[6, 3, 2], -1.0, 1.0);
        let f = split_dynamic_tensors(&m).unwrap();
        assert_eq!(f.a.data(), &m.data()[..18]);
        assert_eq!(f.b.data(), &m.data()[18..]);
        assert!(split_dynamic_tensors(&Tensor::zeros(&[3, 2, 2])).is_err());
    }

    fn dense_params(rng: &mut ChaCha8Rng, c: usize, d: usize, levels: usize, tasks: usize) -> DenseBranchParams {
        let cfg = BranchConfig {
            channels: c,
            dense_width: d,
            min_level: 3,
            max_level: 2 + levels,
            attention_bases: 1,
            ..BranchConfig::default()
        };
        let mut store = ParamStore::new();
        let ids = DenseBranchParams::init(&mut store, rng, &cfg, tasks);
        ids.map(|&id| store.get(id).clone().map(|v| v + 0.02))
    }

    fn random_factors(rng: &mut ChaCha8Rng, pyr: &FeaturePyramid, d: usize) -> Vec<Rank1Factors> {
        pyr.dims()
            .iter()
            .map(|&(h, w)| {
                Rank1Factors::new(
                    Tensor::rand_uniform(rng, &[d, h, w], 0.5, 1.5),
                    Tensor::rand_uniform(rng, &[d, h, w], 0.5, 1.5),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn single_level_is_one_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pyr = pyramid(&mut rng, 8, 5, 6, 1);
        let p = dense_params(&mut rng, 8, 4, 1, 1);
        let f = random_factors(&mut rng, &pyr, 4);
        let got = dense_branch_forward(&pyr, &f, &p).unwrap();
        let want =
            crate::dynamic_ops::dense_merge_level(&pyr.levels()[0], None, &f[0], &p.reduce[0], &p.layers[0][0]).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn unit_factors_reduce_to_top_down_pathway() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pyr = pyramid(&mut rng, 8, 9, 13, 3);
        let p = dense_params(&mut rng, 8, 4, 3, 1);
        let f: Vec<_> = pyr.dims().iter().map(|&(h, w)| Rank1Factors::unit(4, h, w)).collect();
        let got = dense_branch_forward(&pyr, &f, &p).unwrap();
        let mut above: Option<Tensor> = None;
        for li in (0..3).rev() {
            let r = p.reduce[li].forward(&pyr.levels()[li], 1).unwrap();
            let x = match above {
                Some(a) => {
                    let up = oracles::upsample(&a, 2);
                    let (c, h, w) = r.dims3().unwrap();
                    let crop = Tensor::from_fn(&[c, h, w], |i| up.at3(i / (h * w), (i / w) % h, i % w));
                    crate::numerics::add(&r, &crop).unwrap()
                }
                None => r,
            };
            above = Some(p.layers[0][li].conv.forward(&x, 1).unwrap());
        }
        assert!(got.max_abs_diff(&above.unwrap()) < 1e-12);
    }

    #[test]
    fn five_level_fold_matches_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pyr = pyramid(&mut rng, 8, 17, 30, 5);
        let p = dense_params(&mut rng, 8, 4, 5, 1);
        let f = random_factors(&mut rng, &pyr, 4);
        let got = dense_branch_forward(&pyr, &f, &p).unwrap();
        let want = oracles::dense_fold(&pyr, &f, &p);
        assert_eq!(got.shape(), &[4, 17, 30]);
        assert!(got.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn pass_through_routing_matches_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pyr = pyramid(&mut rng, 8, 8, 12, 3);
        let p = dense_params(&mut rng, 8, 8, 3, 3);
        let factors: Vec<Vec<Rank1Factors>> = (0..3).map(|_| random_factors(&mut rng, &pyr, 8)).collect();
        let run = |mode| {
            let tape = Tape::new();
            let levels: Vec<Var<'_>> = pyr.levels().iter().map(|t| tape.constant(t.clone())).collect();
            let f: Vec<Vec<_>> = factors
                .iter()
                .map(|fs| fs.iter().map(|f| f.constants(&tape)).collect())
                .collect();
            let out = dense_branch_forward_var(&levels, &f, &p.constants(&tape), mode, None).unwrap();
            out.basis.iter().map(|b| b.tensor()).collect::<Vec<_>>()
        };
        let a = run(RoutingMode::Disabled);
        let b = run(RoutingMode::PassThrough);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.max_abs_diff(y), 0.0);
        }
    }

    #[test]
    fn learned_routing_logs_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = small_cfg(3);
        let mut store = ParamStore::new();
        let inst = InstanceBranchParams::init(&mut store, &mut rng, &cfg, 2);
        let routing = BranchRouting::init(&mut store, &mut rng, "inst", 2, 8, 8, 2).unwrap();
        let pyr = pyramid(&mut rng, 8, 6, 6, 2);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let levels: Vec<Var<'_>> = pyr.levels().iter().map(|t| tape.constant(t.clone())).collect();
        let out = instance_branch_forward_var(
            &levels,
            &inst.bind(&b),
            &cfg,
            2,
            RoutingMode::Learned,
            Some(&routing.bind(&b)),
        )
        .unwrap();
        assert_eq!(out.scores.len(), 2);
        for lvl in &out.scores {
            assert_eq!(lvl.len(), 2);
            for s in lvl {
                assert_eq!(s.len(), 8);
                assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
            }
        }
        assert_eq!(out.factors.len(), 2);
        assert_eq!(out.factors[1][0].a.shape(), vec![4, 6, 6]);
    }

    #[test]
    fn whole_image_box_goes_to_level_three() {
        let gts = [GtInstance {
            box2d: [0.0, 0.0, 64.0, 64.0],
            class_id: 0,
        }];
        let a = assign_locations(&[(8, 8), (4, 4)], 3, &gts).unwrap();
        assert!(a.iter().all(|x| x.level == 3));
        assert_eq!(level_for_box(&[0.0, 0.0, 64.5, 10.0], 3, 7), 4);
        assert_eq!(level_for_box(&[0.0, 0.0, 900.0, 10.0], 3, 7), 7);
        assert_eq!(level_for_box(&[0.0, 0.0, 900.0, 10.0], 3, 5), 5);
    }

    #[test]
    fn center_cell_always_assigned() {
        let gts = [GtInstance {
            box2d: [13.0, 21.0, 17.0, 26.0],
            class_id: 1,
        }];
        let a = assign_locations(&[(8, 8)], 3, &gts).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].location, ((23.5f64 / 8.0).round() as usize, 2));
    }

    #[test]
    fn assignment_matches_exhaustive_rule() {
        use rand::Rng;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts: Vec<GtInstance> = (0..5)
                .map(|k| {
                    let w = rng.gen_range(4.0..200.0);
                    let h = rng.gen_range(4.0..120.0);
                    let x = rng.gen_range(0.0..256.0 - w);
                    let y = rng.gen_range(0.0..128.0 - h);
                    GtInstance {
                        box2d: [x, y, x + w, y + h],
                        class_id: k % 2,
                    }
                })
                .collect();
            let dims = [(16, 32), (8, 16), (4, 8), (2, 4), (1, 2)];
            let got = assign_locations(&dims, 3, &gts).unwrap();
            assert_eq!(got, oracles::assign_exhaustive(&dims, 3, &gts));
        }
    }

    #[test]
    fn proposals_carry_embeddings() {
        let e = Tensor::from_fn(&[3, 8, 8], |i| i as f64);
        let gts = [GtInstance {
            box2d: [8.0, 8.0, 40.0, 40.0],
            class_id: 1,
        }];
        let props = assign_and_filter(&[e.clone()], 3, &gts).unwrap();
        assert!(!props.is_empty());
        for p in props {
            let (i, j) = p.location;
            assert_eq!(p.embedding, vec![e.at3(0, i, j), e.at3(1, i, j), e.at3(2, i, j)]);
            assert_eq!(p.class_id, 1);
        }
        assert!(assign_and_filter(&[Tensor::zeros(&[3, 8, 8])], 3, &[]).unwrap().is_empty());
    }

    #[test]
    fn constant_map_crops_constant() {
        let f = Tensor::full(&[2, 6, 6], 3.5);
        let c = crop_roi(&f, &[4.0, 4.0, 30.0, 20.0], ROI_SIZE).unwrap();
        assert_eq!(c.shape(), &[2, 56, 56]);
        assert!(c.data().iter().all(|&v| (v - 3.5).abs() < 1e-15));
        assert!(crop_roi(&f, &[4.0, 4.0, 4.0, 20.0], ROI_SIZE).is_err());
    }

    #[test]
    fn full_extent_crop_matches_ramp_resize() {
        let (h, w) = (6, 9);
        let f = Tensor::from_fn(&[1, h, w], |i| 0.7 * (i / w) as f64 - 0.3 * (i % w) as f64 + 2.0);
        let box2d = [0.0, 0.0, 8.0 * (w - 1) as f64, 8.0 * (h - 1) as f64];
        let c = crop_roi(&f, &box2d, ROI_SIZE).unwrap();
        let want = oracles::ramp_resize(0.7, -0.3, 2.0, h, w, ROI_SIZE);
        assert!(c.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn one_pixel_box_is_nearly_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = Tensor::rand_uniform(&mut rng, &[1, 6, 6], -1.0, 1.0);
        let c = crop_roi(&f, &[17.0, 20.0, 18.0, 21.0], ROI_SIZE).unwrap();
        let lo = c.data().iter().cloned().fold(f64::MAX, f64::min);
        let hi = c.data().iter().cloned().fold(f64::MIN, f64::max);
        assert!(hi - lo < 0.5 / 8.0 * 4.0);
    }

    #[test]
    fn init_conv_bias_value() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv::init(&mut store, &mut rng, "x", 2, 3, 3, Some(0.5));
        assert_eq!(store.get(c.bias.unwrap()).data(), &[0.5, 0.5]);
        assert_eq!(store.get(c.weight).shape(), &[2, 3, 3, 3]);
    }
}
