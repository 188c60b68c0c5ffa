//! Channel-wise and task-aware dynamic routers.
//!
//! A router pools its input to a channel descriptor, applies one 1×1
//! convolution producing `2R` logits, and activates the first `R` with a
//! sigmoid (weights for the primary task's own features) and the second `R`
//! with a softmax over channels (weights for a secondary task's features).
//! The task-aware variant appends a learned task embedding to the
//! descriptor: the sigmoid head sees the primary task's embedding and the
//! softmax head the secondary task's.

use crate::error::{arg_err, shape_err, Result};
use crate::numerics::{self, Bound, ParamId, Tape, Tensor, Var};

/// Per-channel mixing weights for one (primary, secondary) task pair.
#[derive(Clone, Debug)]
pub struct RoutingScores<T = Tensor> {
    /// Sigmoid head, each entry in `(0, 1)`.
    pub primary: T,
    /// Softmax head, nonnegative and summing to one.
    pub secondary: T,
}

impl RoutingScores<Tensor> {
    /// Scores that pass the primary features through untouched.
    pub fn pass_through(channels: usize) -> Self {
        Self {
            primary: Tensor::ones(&[channels]),
            secondary: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.primary.len()
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> RoutingScores<Var<'t>> {
        RoutingScores {
            primary: tape.constant(self.primary.clone()),
            secondary: tape.constant(self.secondary.clone()),
        }
    }
}

/// How routers participate in a multi-task forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Tasks read only their own features; no router exists.
    Disabled,
    /// Learned router scores.
    Learned,
    /// Routers present but scores frozen to `(ones, zeros)`.
    PassThrough,
}

/// Shared projection of one-hot task ids to `width`-dimensional embeddings.
#[derive(Clone, Debug)]
pub struct TaskEmbedder<T = Tensor> {
    /// `width × num_tasks`; column `t` is the embedding of task `t`.
    pub weight: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbedding {
    pub task_id: usize,
    pub emb: Tensor,
}

impl TaskEmbedder<Tensor> {
    pub fn embed(&self, task_id: usize) -> Result<TaskEmbedding> {
        let (width, tasks) = self.weight.dims2()?;
        if task_id >= tasks {
            return Err(arg_err("TaskEmbedder", format!("task {task_id} of {tasks}")));
        }
        let emb = Tensor::from_fn(&[width], |r| self.weight.at2(r, task_id));
        Ok(TaskEmbedding { task_id, emb })
    }
}

impl<'t> TaskEmbedder<Var<'t>> {
    pub fn embed(&self, task_id: usize) -> Result<Var<'t>> {
        let shape = self.weight.shape();
        let [width, tasks] = shape[..] else {
            return Err(shape_err("TaskEmbedder", "weight must be a matrix"));
        };
        if task_id >= tasks {
            return Err(arg_err("TaskEmbedder", format!("task {task_id} of {tasks}")));
        }
        self.weight
            .gather((0..width).map(|r| r * tasks + task_id).collect(), &[width])
    }
}

impl TaskEmbedder<ParamId> {
    pub fn bind<'t>(&self, b: &Bound<'t>) -> TaskEmbedder<Var<'t>> {
        TaskEmbedder { weight: b[self.weight] }
    }
}

/// One router's 1×1 convolution: `weight` is `2R × (C_in + E)`, `bias` is
/// `2R`. `E = 0` for a channel router and `C_in / 8` for a task-aware one.
#[derive(Clone, Debug)]
pub struct RouterParams<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

/// Extents of a router: `(input channels, embedding width, routed channels)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouterShape {
    pub in_channels: usize,
    pub emb_width: usize,
    pub routed: usize,
}

impl RouterShape {
    pub fn channel(in_channels: usize, routed: usize) -> Self {
        Self {
            in_channels,
            emb_width: 0,
            routed,
        }
    }

    /// Task-aware router; the embedding is `C_in / 8` wide.
    pub fn task_aware(in_channels: usize, routed: usize) -> Result<Self> {
        if in_channels % 8 != 0 || in_channels == 0 {
            return Err(arg_err(
                "RouterShape",
                format!("task embeddings need C divisible by 8, got {in_channels}"),
            ));
        }
        Ok(Self {
            in_channels,
            emb_width: in_channels / 8,
            routed,
        })
    }

    pub fn weight_shape(&self) -> [usize; 2] {
        [2 * self.routed, self.in_channels + self.emb_width]
    }
}

impl<T> RouterParams<T> {
    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> RouterParams<U> {
        RouterParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl RouterParams<Tensor> {
    pub fn zeros(shape: RouterShape) -> Self {
        Self {
            weight: Tensor::zeros(&shape.weight_shape()),
            bias: Tensor::zeros(&[2 * shape.routed]),
        }
    }
}

impl RouterParams<ParamId> {
    pub fn bind<'t>(&self, b: &Bound<'t>) -> RouterParams<Var<'t>> {
        self.map(|&id| b[id])
    }
}

fn routed_width(weight: &[usize], bias: &[usize]) -> Result<usize> {
    match (weight, bias) {
        ([rows, _], [b]) if rows % 2 == 0 && rows == b => Ok(rows / 2),
        _ => Err(shape_err(
            "RouterParams",
            format!("weight {weight:?} / bias {bias:?} do not form a 2R×K router"),
        )),
    }
}

/// Pooled descriptor of `x` as a column vector, with an optional embedding
/// appended.
fn descriptor<'t>(x: Var<'t>, emb: Option<Var<'t>>) -> Result<Var<'t>> {
    let c = x.shape()[0];
    let g = x.gap()?.reshape(&[c, 1])?;
    match emb {
        Some(e) => {
            let n = e.shape().iter().product();
            x.tape().concat(&[g, e.reshape(&[n, 1])?], 0)
        }
        None => Ok(g),
    }
}

fn heads<'t>(
    params: &RouterParams<Var<'t>>,
    primary_in: Var<'t>,
    secondary_in: Var<'t>,
) -> Result<RoutingScores<Var<'t>>> {
    let rows = params.weight.shape()[0];
    let r = rows / 2;
    let logits = |lo: usize, input: Var<'t>| -> Result<Var<'t>> {
        let w = params.weight.slice(0, lo, lo + r)?;
        let b = params.bias.slice(0, lo, lo + r)?.reshape(&[r, 1])?;
        w.matmul(input)?.add(b)?.reshape(&[r])
    };
    Ok(RoutingScores {
        primary: logits(0, primary_in)?.sigmoid(),
        secondary: logits(r, secondary_in)?.softmax(0)?,
    })
}

fn check_router_input(x: &[usize], params: &RouterParams<Var<'_>>, with_emb: bool) -> Result<()> {
    routed_width(&params.weight.shape(), &params.bias.shape())?;
    if x.len() != 3 {
        return Err(shape_err("router", format!("input must be C×H×W, got {x:?}")));
    }
    let expected_cols = x[0] + if with_emb { x[0] / 8 } else { 0 };
    if params.weight.shape()[1] != expected_cols {
        return Err(shape_err(
            "router",
            format!(
                "router expects {} input columns, descriptor has {expected_cols}",
                params.weight.shape()[1]
            ),
        ));
    }
    Ok(())
}

/// `{σ, softmax}(Conv1×1(GAP(x)))`.
pub fn channel_router_var<'t>(x: Var<'t>, params: &RouterParams<Var<'t>>) -> Result<RoutingScores<Var<'t>>> {
    check_router_input(&x.shape(), params, false)?;
    let d = descriptor(x, None)?;
    heads(params, d, d)
}

/// `{σ, softmax}(Conv1×1(GAP(x) ⊕ Emb_t))`, with `Emb_primary` feeding the
/// sigmoid head and `Emb_secondary` the softmax head.
pub fn task_router_var<'t>(
    x: Var<'t>,
    emb_primary: Var<'t>,
    emb_secondary: Var<'t>,
    params: &RouterParams<Var<'t>>,
) -> Result<RoutingScores<Var<'t>>> {
    let xs = x.shape();
    if xs.len() != 3 || xs[0] % 8 != 0 {
        return Err(arg_err("task_router", format!("input {xs:?} needs C divisible by 8")));
    }
    let width = xs[0] / 8;
    for e in [emb_primary, emb_secondary] {
        if e.shape() != [width] {
            return Err(shape_err(
                "task_router",
                format!("embedding {:?} must have length C/8 = {width}", e.shape()),
            ));
        }
    }
    check_router_input(&xs, params, true)?;
    let dp = descriptor(x, Some(emb_primary))?;
    let ds = descriptor(x, Some(emb_secondary))?;
    heads(params, dp, ds)
}

pub fn channel_router(x: &Tensor, params: &RouterParams) -> Result<RoutingScores> {
    let tape = Tape::new();
    let p = params.map(|t| tape.constant(t.clone()));
    let s = channel_router_var(tape.constant(x.clone()), &p)?;
    Ok(RoutingScores {
        primary: s.primary.tensor(),
        secondary: s.secondary.tensor(),
    })
}

pub fn task_router(
    x: &Tensor,
    emb_primary: &TaskEmbedding,
    emb_secondary: &TaskEmbedding,
    params: &RouterParams,
) -> Result<RoutingScores> {
    let tape = Tape::new();
    let p = params.map(|t| tape.constant(t.clone()));
    let s = task_router_var(
        tape.constant(x.clone()),
        tape.constant(emb_primary.emb.clone()),
        tape.constant(emb_secondary.emb.clone()),
        &p,
    )?;
    Ok(RoutingScores {
        primary: s.primary.tensor(),
        secondary: s.secondary.tensor(),
    })
}

/// `g_primary ⊗ F_m + g_secondary ⊗ F_a`, each channel weight broadcast over
/// the spatial extent.
pub fn route_features_var<'t>(
    primary: Var<'t>,
    secondary: Var<'t>,
    scores: &RoutingScores<Var<'t>>,
) -> Result<Var<'t>> {
    let shape = primary.shape();
    if shape.len() != 3 || secondary.shape() != shape {
        return Err(shape_err(
            "route_features",
            format!("F_m {:?} and F_a {:?} must share a C×H×W shape", shape, secondary.shape()),
        ));
    }
    let c = shape[0];
    if scores.primary.shape() != [c] || scores.secondary.shape() != [c] {
        return Err(shape_err(
            "route_features",
            format!("scores must have length {c}"),
        ));
    }
    let gp = scores.primary.reshape(&[c, 1, 1])?;
    let gs = scores.secondary.reshape(&[c, 1, 1])?;
    primary.mul(gp)?.add(secondary.mul(gs)?)
}

pub fn route_features(primary: &Tensor, secondary: &Tensor, scores: &RoutingScores) -> Result<Tensor> {
    let tape = Tape::new();
    let out = route_features_var(
        tape.constant(primary.clone()),
        tape.constant(secondary.clone()),
        &scores.constants(&tape),
    )?;
    Ok(out.tensor())
}

/// Routes task `own`'s features against every other task.
///
/// `pairs` holds one `(secondary task, scores)` entry per other task. With a
/// single pair this is [`route_features_var`]; with more, the primary weights
/// are averaged across pairs and the secondary contributions summed.
pub fn route_tasks_var<'t>(
    features: &[Var<'t>],
    own: usize,
    pairs: &[(usize, RoutingScores<Var<'t>>)],
) -> Result<Var<'t>> {
    match pairs {
        [] => Ok(features[own]),
        [(s, scores)] => route_features_var(features[own], features[*s], scores),
        _ => {
            let shape = features[own].shape();
            let c = shape[0];
            let mut gp = pairs[0].1.primary;
            for (_, sc) in &pairs[1..] {
                gp = gp.add(sc.primary)?;
            }
            let gp = gp.scale(1.0 / pairs.len() as f64).reshape(&[c, 1, 1])?;
            let mut out = features[own].mul(gp)?;
            for (s, sc) in pairs {
                if features[*s].shape() != shape {
                    return Err(shape_err("route_tasks", "task features differ in shape"));
                }
                out = out.add(features[*s].mul(sc.secondary.reshape(&[c, 1, 1])?)?)?;
            }
            Ok(out)
        }
    }
}

/// Splits `2C'×H×W` into its first and second channel halves.
pub fn split_context_var<'t>(m: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let s = m.shape();
    if s.len() != 3 {
        return Err(shape_err("split_context", format!("expected C×H×W, got {s:?}")));
    }
    if s[0] % 2 != 0 {
        return Err(arg_err("split_context", format!("odd channel count {}", s[0])));
    }
    let half = s[0] / 2;
    Ok((m.slice(0, 0, half)?, m.slice(0, half, s[0])?))
}

pub fn split_context(m: &Tensor) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let (a, b) = split_context_var(tape.constant(m.clone()))?;
    Ok((a.tensor(), b.tensor()))
}

/// Routing state used by [`route_features`]: checks the score invariants.
pub fn validate_scores(scores: &RoutingScores, tol: f64) -> Result<()> {
    if scores.primary.len() != scores.secondary.len() {
        return Err(shape_err("RoutingScores", "heads differ in length"));
    }
    if !scores.primary.data().iter().all(|&g| g > 0.0 && g < 1.0) {
        return Err(arg_err("RoutingScores", "primary scores must lie in (0, 1)"));
    }
    let sum: f64 = scores.secondary.data().iter().sum();
    if scores.secondary.data().iter().any(|&g| g < 0.0) || (sum - 1.0).abs() > tol {
        return Err(arg_err("RoutingScores", format!("secondary scores sum to {sum}")));
    }
    Ok(())
}

/// Reference composition `GAP → matmul → activations` used by tests.
#[doc(hidden)]
pub fn compose_router_reference(x: &Tensor, emb: Option<(&Tensor, &Tensor)>, params: &RouterParams) -> RoutingScores {
    let g = numerics::global_avg_pool(x).expect("C×H×W input");
    let rows = params.weight.shape()[0];
    let cols = params.weight.shape()[1];
    let r = rows / 2;
    let logit = |row: usize, e: Option<&Tensor>| {
        let mut acc = params.bias.data()[row];
        for k in 0..cols {
            let v = if k < g.len() {
                g.data()[k]
            } else {
                e.expect("embedding columns").data()[k - g.len()]
            };
            acc += params.weight.at2(row, k) * v;
        }
        acc
    };
    let lp: Vec<f64> = (0..r).map(|i| logit(i, emb.map(|e| e.0))).collect();
    let ls: Vec<f64> = (0..r).map(|i| logit(r + i, emb.map(|e| e.1))).collect();
    let m = ls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = ls.iter().map(|v| (v - m).exp()).sum();
    RoutingScores {
        primary: Tensor::from_vec(lp.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()),
        secondary: Tensor::from_vec(ls.iter().map(|v| (v - m).exp() / z).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, shape: RouterShape) -> RouterParams {
        RouterParams {
            weight: Tensor::rand_uniform(rng, &shape.weight_shape(), -1.0, 1.0),
            bias: Tensor::rand_uniform(rng, &[2 * shape.routed], -1.0, 1.0),
        }
    }

    #[test]
    fn zero_router_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::rand_uniform(&mut rng, &[8, 3, 4], -3.0, 3.0);
        let s = channel_router(&x, &RouterParams::zeros(RouterShape::channel(8, 6))).unwrap();
        assert!(s.primary.data().iter().all(|&v| v == 0.5));
        assert!(s.secondary.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        let emb = TaskEmbedding {
            task_id: 0,
            emb: Tensor::ones(&[1]),
        };
        let shape = RouterShape::task_aware(8, 6).unwrap();
        let t = task_router(&x, &emb, &emb, &RouterParams::zeros(shape)).unwrap();
        assert!(t.primary.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_router_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(&mut rng, &[5, 4, 3], -1.0, 1.0);
        let p = random_params(&mut rng, RouterShape::channel(5, 7));
        let got = channel_router(&x, &p).unwrap();
        let want = compose_router_reference(&x, None, &p);
        assert!(got.primary.max_abs_diff(&want.primary) < 1e-12);
        assert!(got.secondary.max_abs_diff(&want.secondary) < 1e-12);
    }

    #[test]
    fn task_router_with_identical_embeddings_is_widened_channel_router() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::rand_uniform(&mut rng, &[16, 3, 3], -1.0, 1.0);
        let shape = RouterShape::task_aware(16, 16).unwrap();
        let p = random_params(&mut rng, shape);
        let emb = TaskEmbedding {
            task_id: 1,
            emb: Tensor::rand_uniform(&mut rng, &[2], -1.0, 1.0),
        };
        let got = task_router(&x, &emb, &emb, &p).unwrap();
        // Append the embedding as two extra constant channels: their GAP is
        // the embedding itself.
        let widened = Tensor::from_fn(&[18, 3, 3], |i| {
            let c = i / 9;
            if c < 16 {
                x.data()[i]
            } else {
                emb.emb.data()[c - 16]
            }
        });
        let plain = channel_router(&widened, &p);
        assert!(plain.is_ok());
        let plain = plain.unwrap();
        assert!(got.primary.max_abs_diff(&plain.primary) < 1e-14);
        assert!(got.secondary.max_abs_diff(&plain.secondary) < 1e-14);
    }

    #[test]
    fn distinct_task_ids_change_scores() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = Tensor::rand_uniform(&mut rng, &[8, 2, 2], -1.0, 1.0);
            let shape = RouterShape::task_aware(8, 8).unwrap();
            let p = random_params(&mut rng, shape);
            let embedder = TaskEmbedder {
                weight: Tensor::rand_uniform(&mut rng, &[1, 3], -1.0, 1.0),
            };
            let (e0, e1) = (embedder.embed(0).unwrap(), embedder.embed(1).unwrap());
            let a = task_router(&x, &e0, &e1, &p).unwrap();
            let b = task_router(&x, &e1, &e0, &p).unwrap();
            assert!(a.primary.max_abs_diff(&b.primary) > 0.0);
            assert!(a.secondary.max_abs_diff(&b.secondary) > 0.0);
        }
    }

    #[test]
    fn task_router_rejects_wrong_embedding_width() {
        let x = Tensor::zeros(&[8, 2, 2]);
        let bad = TaskEmbedding {
            task_id: 0,
            emb: Tensor::zeros(&[2]),
        };
        let p = RouterParams::zeros(RouterShape::task_aware(8, 8).unwrap());
        assert!(task_router(&x, &bad, &bad, &p).is_err());
        assert!(RouterShape::task_aware(12, 4).is_err());
        assert!(TaskEmbedder { weight: Tensor::zeros(&[1, 2]) }.embed(2).is_err());
    }

    #[test]
    fn route_features_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fm = Tensor::rand_uniform(&mut rng, &[3, 2, 4], -1.0, 1.0);
        let fa = Tensor::rand_uniform(&mut rng, &[3, 2, 4], -1.0, 1.0);
        let pass = route_features(&fm, &fa, &RoutingScores::pass_through(3)).unwrap();
        assert_eq!(pass, fm);
        let scores = RoutingScores {
            primary: Tensor::from_vec(vec![0.2, 0.5, 0.9]),
            secondary: Tensor::from_vec(vec![0.3, 0.3, 0.4]),
        };
        let zero_a = route_features(&fm, &Tensor::zeros(&[3, 2, 4]), &scores).unwrap();
        for c in 0..3 {
            for i in 0..8 {
                let v = fm.data()[c * 8 + i] * scores.primary.data()[c];
                assert_eq!(zero_a.data()[c * 8 + i], v);
            }
        }
        assert!(route_features(&fm, &Tensor::zeros(&[3, 2, 3]), &scores).is_err());
        assert!(route_features(&fm, &fa, &RoutingScores::pass_through(2)).is_err());
    }

    #[test]
    fn split_context_halves() {
        let m = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        let (a, b) = split_context(&m).unwrap();
        assert_eq!(a.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(b.data(), &[4.0, 5.0, 6.0, 7.0]);
        assert!(split_context(&Tensor::zeros(&[3, 2, 2])).is_err());
        let joined = numerics::concat(&[&a, &b], 0).unwrap();
        assert_eq!(joined, m);
    }

    #[test]
    fn multi_task_routing_reduces_to_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let feats: Vec<Var<'_>> = (0..3)
            .map(|_| tape.constant(Tensor::rand_uniform(&mut rng, &[2, 2, 2], -1.0, 1.0)))
            .collect();
        let pass = RoutingScores::pass_through(2);
        let pairs = vec![(1, pass.constants(&tape)), (2, pass.constants(&tape))];
        let out = route_tasks_var(&feats, 0, &pairs).unwrap();
        assert_eq!(out.tensor(), feats[0].tensor());
    }

    proptest! {
        #[test]
        fn scores_respect_range_invariants(
            seed in 0u64..10_000,
            c in 1usize..5,
            routed in 1usize..12,
            h in 1usize..5,
            scale in 0.1f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::rand_uniform(&mut rng, &[8 * c, h, 3], -scale, scale);
            let shape = RouterShape::task_aware(8 * c, routed).unwrap();
            let p = random_params(&mut rng, shape);
            let e = TaskEmbedding { task_id: 0, emb: Tensor::rand_uniform(&mut rng, &[c], -1.0, 1.0) };
            let s = task_router(&x, &e, &e, &p).unwrap();
            prop_assert!(validate_scores(&s, 1e-9).is_ok());
            let cr = channel_router(&x, &RouterParams {
                weight: Tensor::rand_uniform(&mut rng, &[2 * routed, 8 * c], -scale, scale),
                bias: Tensor::zeros(&[2 * routed]),
            }).unwrap();
            let sum: f64 = cr.secondary.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(cr.primary.data().iter().all(|&g| (0.0..=1.0).contains(&g)));
        }
    }
}
