//! The toy multi-task network: a strided convolution backbone feeding the
//! instance and dense branches, with segmentation, depth and 3D detection
//! heads on top.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branches::{
    assign_locations, crop_roi_var, dense_branch_forward_var, embedding_at_var, instance_branch_forward_var,
    roi_sample_points, Assignment, BranchConfig, BranchRouting, DenseBranchParams, GtInstance, InstanceBranchParams,
    BASIS_STRIDE, ROI_SIZE,
};
use crate::error::{arg_err, Result};
use crate::geometry::{project, Box3D, CameraIntrinsics};
use crate::heads::{
    aggregate_instance_embeddings_var, attribute_loss_var, bce_with_logits_var, center_offset_loss_var,
    corner_terms_var, decode_3d_var, depth_head_var, depth_l1_var, factored_attention_mask_var, panoptic_logits_var,
    pixel_cross_entropy_var, AttentionBasis, DecodeParams, DepthHeadParams, EmbeddingLayout, LossComponents,
    PanopticWeights, Pred3D, SegEmbedding, ATTENTION_RANK, ATTENTION_SIZE,
};
use crate::numerics::{fan_in_uniform, Bound, Conv, ParamId, ParamStore, Tape, Tensor, Var};
use crate::routing::RoutingMode;

use super::scene::{SyntheticScene, GROUND, SKY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Depth,
    Det3d,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Seg, Task::Depth, Task::Det3d];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Seg => "seg",
            Task::Depth => "depth",
            Task::Det3d => "det3d",
        })
    }
}

impl FromStr for Task {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "seg" => Ok(Task::Seg),
            "depth" => Ok(Task::Depth),
            "det3d" => Ok(Task::Det3d),
            other => Err(arg_err("Task", format!("unknown task {other:?}; expected seg, depth or det3d"))),
        }
    }
}

/// Parses `seg,depth,det3d`; order and duplicates are normalized away.
pub fn parse_tasks(s: &str) -> Result<Vec<Task>> {
    let mut tasks: Vec<Task> = s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    tasks.sort_unstable();
    tasks.dedup();
    if tasks.is_empty() {
        return Err(arg_err("parse_tasks", "at least one task is required"));
    }
    Ok(tasks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub attributes: usize,
    /// Instance depth is `depth_prior + depth_scale · raw`.
    pub depth_prior: f64,
    pub depth_scale: f64,
    /// Initial output of the dense depth head.
    pub dense_depth_prior: f64,
    /// Offset on the raw orientation cosine.
    pub cos_prior: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            attributes: 2,
            depth_prior: 20.0,
            depth_scale: 10.0,
            dense_depth_prior: 30.0,
            cos_prior: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub branch: BranchConfig,
    pub head: HeadConfig,
    pub tasks: Vec<Task>,
    pub routing: RoutingMode,
}

impl NetConfig {
    /// A narrow three-level network for fast checks on small scenes.
    pub fn tiny(tasks: Vec<Task>, routing: RoutingMode) -> Self {
        let layout = EmbeddingLayout::new(8, 2, 2);
        Self {
            branch: BranchConfig {
                channels: 8,
                tower_depth: 1,
                min_level: 3,
                max_level: 5,
                dense_width: 8,
                attention_bases: 2,
                embed_channels: layout.width(),
                size_divisibility: 4,
            },
            head: HeadConfig::default(),
            tasks,
            routing,
        }
    }

    pub fn layout(&self) -> EmbeddingLayout {
        EmbeddingLayout::new(self.branch.dense_width, self.branch.attention_bases, self.head.attributes)
    }

    pub fn validate(&self) -> Result<()> {
        self.branch.validate()?;
        if self.tasks.is_empty() {
            return Err(arg_err("NetConfig", "at least one task is required"));
        }
        let mut sorted = self.tasks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.tasks {
            return Err(arg_err("NetConfig", "tasks must be sorted and unique"));
        }
        if self.branch.embed_channels != self.layout().width() {
            return Err(arg_err(
                "NetConfig",
                format!(
                    "embed_channels = {} but the embedding layout needs {}",
                    self.branch.embed_channels,
                    self.layout().width()
                ),
            ));
        }
        if self.routed() && self.branch.dense_width % 8 != 0 {
            return Err(arg_err("NetConfig", "routing needs D′ divisible by 8"));
        }
        Ok(())
    }

    pub fn task_index(&self, task: Task) -> Option<usize> {
        self.tasks.iter().position(|&t| t == task)
    }

    /// Whether router parameters exist.
    pub fn routed(&self) -> bool {
        self.tasks.len() >= 2 && self.routing != RoutingMode::Disabled
    }
}

/// All learnable tensors of the network. Routers come last so that the
/// remaining parameters are identical with and without routing.
#[derive(Clone, Debug)]
pub struct NetParams<T> {
    pub backbone: Vec<Conv<T>>,
    pub instance: InstanceBranchParams<T>,
    pub dense: DenseBranchParams<T>,
    pub basis: AttentionBasis<T>,
    pub pano_stuff: T,
    pub w_z: T,
    pub depth: DepthHeadParams<T>,
    /// `(instance, dense)` routers.
    pub routing: Option<(BranchRouting<T>, BranchRouting<T>)>,
}

impl<T> NetParams<T> {
    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> NetParams<U> {
        NetParams {
            backbone: self.backbone.iter().map(|c| c.map(&f)).collect(),
            instance: self.instance.map(&f),
            dense: self.dense.map(&f),
            basis: self.basis.map(&f),
            pano_stuff: f(&self.pano_stuff),
            w_z: f(&self.w_z),
            depth: self.depth.map(&f),
            routing: self.routing.as_ref().map(|(i, d)| (i.map(&f), d.map(&f))),
        }
    }
}

/// Seed offset of the router initialization stream.
const ROUTER_STREAM: u64 = 0x5EED_0F_2011;

pub struct ToyNet {
    pub config: NetConfig,
    pub store: ParamStore,
    pub params: NetParams<ParamId>,
}

impl ToyNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let b = &config.branch;
        let tasks = config.tasks.len();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = b.channels;
        let backbone = (0..b.max_level)
            .map(|i| {
                let (c_in, c_out) = match i {
                    0 => (3, c / 2),
                    1 => (c / 2, c),
                    _ => (c, c),
                };
                Conv::init(&mut store, &mut rng, &format!("backbone.conv{i}"), c_out, c_in, 3, Some(0.0))
            })
            .collect();
        let instance = InstanceBranchParams::init(&mut store, &mut rng, b, tasks);
        let dense = DenseBranchParams::init(&mut store, &mut rng, b, tasks);
        let kshape = [b.attention_bases, ATTENTION_RANK, ATTENTION_SIZE];
        let basis = AttentionBasis {
            u: store.add("heads.attention_u", fan_in_uniform(&mut rng, &kshape, ATTENTION_RANK)),
            v: store.add("heads.attention_v", fan_in_uniform(&mut rng, &kshape, ATTENTION_RANK)),
        };
        let d = b.dense_width;
        let pano_stuff = store.add("heads.pano_stuff", fan_in_uniform(&mut rng, &[d, 2], d));
        let w_z = store.add("heads.w_z", Tensor::zeros(&[d]));
        let depth = DepthHeadParams::init(&mut store, &mut rng, d, config.head.dense_depth_prior);
        let routing = if config.routed() {
            let mut rrng = ChaCha8Rng::seed_from_u64(seed ^ ROUTER_STREAM);
            let n = b.num_levels();
            let inst = BranchRouting::init(&mut store, &mut rrng, "routing.instance", n, c, 2 * d, tasks)?;
            let dense = BranchRouting::init(&mut store, &mut rrng, "routing.dense", n, d, d, tasks)?;
            Some((inst, dense))
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            params: NetParams {
                backbone,
                instance,
                dense,
                basis,
                pano_stuff,
                w_z,
                depth,
                routing,
            },
        })
    }

    pub fn bind<'t>(&self, b: &Bound<'t>) -> NetParams<Var<'t>> {
        self.params.map(|&id| b[id])
    }

    /// Every parameter a constant except `id`, which is `x`.
    pub fn bind_single<'t>(&self, tape: &'t Tape, id: ParamId, x: Var<'t>) -> NetParams<Var<'t>> {
        self.params
            .map(|&p| if p == id { x } else { tape.constant(self.store.get(p).clone()) })
    }
}

/// Ground truth of one scene in the form the losses consume.
#[derive(Clone, Debug)]
pub struct SceneTargets {
    /// Image zero-padded to the size divisibility.
    pub image: Tensor,
    pub height: usize,
    pub width: usize,
    pub intrinsics: CameraIntrinsics,
    pub gts: Vec<GtInstance>,
    pub boxes: Vec<Box3D>,
    /// Projected 3D centers `(u, v)`.
    pub centers_px: Vec<(f64, f64)>,
    pub assignments: Vec<Assignment>,
    /// `(class, instance id)` at each basis-map cell, `None` in padding.
    pub basis_labels: Vec<Option<(usize, usize)>>,
    pub basis_dims: (usize, usize),
    /// Per object, `ROI_SIZE²` membership of the RoI sample points.
    pub masks: Vec<Tensor>,
    pub depth: Tensor,
}

fn halve(n: usize, times: usize) -> usize {
    (0..times).fold(n, |n, _| n.div_ceil(2))
}

impl SceneTargets {
    pub fn new(scene: &SyntheticScene, cfg: &BranchConfig) -> Result<Self> {
        let (h, w) = (scene.height(), scene.width());
        let div = cfg.size_divisibility;
        let (ph, pw) = (h.div_ceil(div) * div, w.div_ceil(div) * div);
        let image = if (ph, pw) == (h, w) {
            scene.image.clone()
        } else {
            let mut data = vec![0.0; 3 * ph * pw];
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        data[(c * ph + y) * pw + x] = scene.image.at3(c, y, x);
                    }
                }
            }
            Tensor::new(vec![3, ph, pw], data)?
        };
        let dims: Vec<(usize, usize)> = (cfg.min_level..=cfg.max_level).map(|l| (halve(ph, l), halve(pw, l))).collect();
        let gts = scene.gt_instances();
        let assignments = assign_locations(&dims, cfg.min_level, &gts)?;
        let stride_level = BASIS_STRIDE.trailing_zeros() as usize;
        let basis_dims = (halve(ph, stride_level), halve(pw, stride_level));
        let pan = &scene.panoptic;
        let mut basis_labels = Vec::with_capacity(basis_dims.0 * basis_dims.1);
        for i in 0..basis_dims.0 {
            for j in 0..basis_dims.1 {
                let (y, x) = (i * BASIS_STRIDE, j * BASIS_STRIDE);
                basis_labels.push((y < h && x < w).then(|| (pan.class[y * w + x], pan.instance[y * w + x])));
            }
        }
        let mut masks = Vec::with_capacity(scene.objects.len());
        let mut centers_px = Vec::with_capacity(scene.objects.len());
        for o in &scene.objects {
            let pts = roi_sample_points(&o.box2d, ROI_SIZE, 1.0)?;
            let m = pts
                .iter()
                .map(|&(y, x)| {
                    let (yi, xi) = ((y as usize).min(h - 1), (x as usize).min(w - 1));
                    (pan.instance[yi * w + xi] == o.instance_id) as u8 as f64
                })
                .collect();
            masks.push(Tensor::new(vec![ROI_SIZE, ROI_SIZE], m)?);
            centers_px.push(project(&scene.intrinsics, o.box3d.center)?);
        }
        Ok(Self {
            image,
            height: h,
            width: w,
            intrinsics: scene.intrinsics,
            gts,
            boxes: scene.objects.iter().map(|o| o.box3d).collect(),
            centers_px,
            assignments,
            basis_labels,
            basis_dims,
            masks,
            depth: scene.depth.clone(),
        })
    }

    pub fn assignments_of(&self, instance: usize) -> impl Iterator<Item = &Assignment> {
        self.assignments.iter().filter(move |a| a.instance == instance)
    }
}

/// Everything one forward pass produces.
pub struct Forward<'t> {
    pub losses: LossComponents<Option<Var<'t>>>,
    /// `[level][task]` primary routing scores of each branch.
    pub instance_scores: Vec<Vec<Tensor>>,
    pub dense_scores: Vec<Vec<Tensor>>,
    pub predictions: Predictions,
}

/// Outputs for evaluation, computed from the same forward pass.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    /// `(2 + instances)×h×w` logits and the object index of each thing column.
    pub panoptic: Option<(Tensor, Vec<usize>)>,
    /// `H×W` meters.
    pub depth: Option<Tensor>,
    /// Per object: decoded box from its proposal nearest the box center, and
    /// the predicted attribute.
    pub boxes: Vec<Option<(Pred3D, Option<usize>)>>,
}

fn mean_of<'t>(terms: &[Var<'t>]) -> Result<Option<Var<'t>>> {
    let Some(first) = terms.first() else {
        return Ok(None);
    };
    let mut acc = first.reshape(&[1])?;
    for t in &terms[1..] {
        acc = acc.add(t.reshape(&[1])?)?;
    }
    Ok(Some(acc.scale(1.0 / terms.len() as f64)))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl ToyNet {
    /// Backbone outputs `P_min..=P_max`.
    pub fn pyramid<'t>(&self, p: &NetParams<Var<'t>>, image: Var<'t>) -> Result<Vec<Var<'t>>> {
        let b = &self.config.branch;
        let mut x = image;
        let mut levels = Vec::with_capacity(b.num_levels());
        for (i, conv) in p.backbone.iter().enumerate() {
            x = conv.forward(x, 2)?.relu();
            if i + 1 >= b.min_level {
                levels.push(x);
            }
        }
        Ok(levels)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, p: &NetParams<Var<'t>>, t: &SceneTargets) -> Result<Forward<'t>> {
        let cfg = &self.config;
        let b = &cfg.branch;
        let tasks = cfg.tasks.len();
        let mode = cfg.routing;
        let pyramid = self.pyramid(p, tape.constant(t.image.clone()))?;
        let (inst_routing, dense_routing) = match &p.routing {
            Some((i, d)) => (Some(i), Some(d)),
            None => (None, None),
        };
        let inst = instance_branch_forward_var(&pyramid, &p.instance, b, tasks, mode, inst_routing)?;
        let dense = dense_branch_forward_var(&pyramid, &inst.factors, &p.dense, mode, dense_routing)?;
        let layout = cfg.layout();
        let embeddings: Vec<Var<'t>> = t
            .assignments
            .iter()
            .map(|a| embedding_at_var(inst.levels[a.level - b.min_level].e, a.location))
            .collect::<Result<_>>()?;
        let mut losses = LossComponents::<Option<Var<'t>>>::default();
        let mut predictions = Predictions {
            boxes: vec![None; t.gts.len()],
            ..Default::default()
        };

        if let Some(ti) = cfg.task_index(Task::Seg) {
            let f = dense.basis[ti];
            let d = b.dense_width;
            let mut columns = Vec::new();
            let mut column_of = vec![None; t.gts.len()];
            let mut owners = Vec::new();
            let mut mask_terms = Vec::new();
            for k in 0..t.gts.len() {
                let embs: Vec<Var<'t>> = t
                    .assignments
                    .iter()
                    .zip(&embeddings)
                    .filter(|(a, _)| a.instance == k)
                    .map(|(_, e)| *e)
                    .collect();
                let Some(agg) = aggregate_instance_embeddings_var(&embs) else {
                    continue;
                };
                let agg = agg?;
                column_of[k] = Some(2 + columns.len());
                owners.push(k);
                let pano = layout.pano();
                columns.push(agg.slice(0, pano.start, pano.end)?.reshape(&[d, 1])?);
                let kr = layout.kernel();
                let fr = layout.factors();
                let seg = SegEmbedding {
                    t: agg.slice(0, kr.start, kr.end)?.reshape(&[b.attention_bases, d])?,
                    s: agg.slice(0, fr.start, fr.end)?.reshape(&[b.attention_bases, ATTENTION_RANK])?,
                };
                let roi = crop_roi_var(f, &t.gts[k].box2d, ROI_SIZE)?;
                let logits = factored_attention_mask_var(roi, &seg, &p.basis)?;
                mask_terms.push(bce_with_logits_var(logits, &t.masks[k])?);
            }
            let thing = if columns.is_empty() { None } else { Some(tape.concat(&columns, 1)?) };
            let logits = panoptic_logits_var(f, &PanopticWeights { stuff: p.pano_stuff, thing })?;
            let targets: Vec<Option<usize>> = t
                .basis_labels
                .iter()
                .map(|l| match *l {
                    Some((c, _)) if c == SKY || c == GROUND => Some(c),
                    Some((_, id)) if id > 0 => column_of[id - 1],
                    _ => None,
                })
                .collect();
            losses.pano = Some(pixel_cross_entropy_var(logits, &targets)?);
            losses.mask = mean_of(&mask_terms)?;
            predictions.panoptic = Some((logits.tensor(), owners));
        }

        if let Some(ti) = cfg.task_index(Task::Depth) {
            let pred = depth_head_var(dense.basis[ti], &p.depth)?.crop_hw(t.height, t.width)?;
            let valid = vec![true; t.height * t.width];
            losses.depth = Some(depth_l1_var(pred, &t.depth, &valid)?);
            predictions.depth = Some(pred.tensor().reshape(&[t.height, t.width])?);
        }

        if let Some(ti) = cfg.task_index(Task::Det3d) {
            let f = dense.basis[ti];
            let e3d = layout.e3d();
            let (mut ctr, mut dim, mut ori, mut loc, mut attr) = (vec![], vec![], vec![], vec![], vec![]);
            for k in 0..t.gts.len() {
                let mine: Vec<(usize, &Assignment)> =
                    t.assignments.iter().enumerate().filter(|(_, a)| a.instance == k).collect();
                if mine.is_empty() {
                    continue;
                }
                let roi = crop_roi_var(f, &t.gts[k].box2d, ROI_SIZE)?;
                let gt = &t.boxes[k];
                let bx = &t.gts[k].box2d;
                let (cx, cy) = ((bx[0] + bx[2]) / 2.0, (bx[1] + bx[3]) / 2.0);
                let mut nearest: Option<(f64, Pred3D, Option<usize>)> = None;
                for (ai, a) in mine {
                    let stride = (1usize << a.level) as f64;
                    let loc_px = (a.location.1 as f64 * stride, a.location.0 as f64 * stride);
                    let dp = DecodeParams {
                        offset_scale: stride,
                        depth_prior: cfg.head.depth_prior,
                        depth_scale: cfg.head.depth_scale,
                        cos_prior: cfg.head.cos_prior,
                    };
                    let raw = embeddings[ai].slice(0, e3d.start, e3d.end)?;
                    let pred = decode_3d_var(raw, loc_px, &t.intrinsics, roi, p.w_z, &dp)?;
                    let terms = corner_terms_var(&pred, gt)?;
                    dim.push(terms.dim);
                    ori.push(terms.ori);
                    loc.extend(terms.loc);
                    ctr.push(center_offset_loss_var(&pred, loc_px, t.centers_px[k], &dp)?);
                    let mut attr_pred = None;
                    if let (Some(logits), Some(target)) = (pred.attr_logits, gt.attribute) {
                        attr.push(attribute_loss_var(logits, target)?);
                        attr_pred = Some(argmax(logits.value().data()));
                    }
                    let dist = (loc_px.0 - cx).hypot(loc_px.1 - cy);
                    if nearest.as_ref().is_none_or(|(d0, _, _)| dist < *d0) {
                        nearest = Some((dist, pred.value(), attr_pred));
                    }
                }
                predictions.boxes[k] = nearest.map(|(_, p, a)| (p, a));
            }
            losses.ctr = mean_of(&ctr)?;
            losses.dim = mean_of(&dim)?;
            losses.ori = mean_of(&ori)?;
            losses.loc = mean_of(&loc)?;
            losses.attr = mean_of(&attr)?;
        }

        Ok(Forward {
            losses,
            instance_scores: inst.scores,
            dense_scores: dense.scores,
            predictions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::{gen_scene, SceneConfig};
    use crate::heads::{total_loss_var, LossWeights};

    #[test]
    fn task_parsing() {
        assert_eq!(parse_tasks("det3d,seg,seg").unwrap(), vec![Task::Seg, Task::Det3d]);
        assert!(parse_tasks("seg,flow").is_err());
        assert!(parse_tasks("").is_err());
    }

    #[test]
    fn forward_produces_every_component() {
        let scfg = SceneConfig {
            height: 64,
            width: 96,
            min_objects: 2,
            ..Default::default()
        };
        let scene = gen_scene(3, &scfg).unwrap();
        let net = ToyNet::new(NetConfig::tiny(Task::ALL.to_vec(), RoutingMode::Learned), 0).unwrap();
        let t = SceneTargets::new(&scene, &net.config.branch).unwrap();
        let tape = Tape::new();
        let bound = net.store.bind(&tape);
        let out = net.forward(&tape, &net.bind(&bound), &t).unwrap();
        assert!(out.losses.pano.is_some() && out.losses.depth.is_some() && out.losses.dim.is_some());
        let total = total_loss_var(&tape, &out.losses, &LossWeights::default()).unwrap();
        assert!(total.item().unwrap().is_finite());
        assert_eq!(out.instance_scores.len(), 3);
        assert_eq!(out.dense_scores[0].len(), 3);
        assert_eq!(out.dense_scores[0][0].len(), 8);
        assert_eq!(out.instance_scores[0][0].len(), 16);
        let grads = tape.backward(total).unwrap();
        let (ri, _) = net.params.routing.as_ref().unwrap();
        assert!(grads.get(bound[ri.routers[0].weight]).is_some());
    }

    #[test]
    fn routers_do_not_shift_other_parameters() {
        let a = ToyNet::new(NetConfig::tiny(Task::ALL.to_vec(), RoutingMode::Disabled), 5).unwrap();
        let b = ToyNet::new(NetConfig::tiny(Task::ALL.to_vec(), RoutingMode::PassThrough), 5).unwrap();
        assert!(b.store.len() > a.store.len());
        for id in a.store.ids() {
            assert_eq!(a.store.name(id), b.store.name(id));
            assert_eq!(a.store.get(id), b.store.get(id));
        }
    }
}
