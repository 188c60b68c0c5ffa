//! Plain SGD over generated scenes, with a CSV loss trace, routing-score
//! logs and directory checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::branches::BranchConfig;
use crate::error::{arg_err, Error, Result};
use crate::heads::{total_loss_var, EmbeddingLayout, LossComponents, LossWeights};
use crate::numerics::{ParamStore, Tape};
use crate::routing::RoutingMode;

use super::eval::{evaluate_scenes, EvalMetrics};
use super::model::{HeadConfig, NetConfig, SceneTargets, Task, ToyNet};
use super::scene::{gen_scene, SceneConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tasks: Vec<Task>,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub branch: BranchConfig,
    pub head: HeadConfig,
    pub loss_weights: LossWeights,
    pub routing: RoutingMode,
    /// Distinct training scenes, visited round-robin; 1 overfits one scene.
    pub scenes: usize,
    pub scene: SceneConfig,
    /// Routing scores are recorded every this many steps and at the end.
    pub log_every: usize,
    /// Rescales the gradient when its global norm exceeds this value.
    pub grad_clip: Option<f64>,
}

/// The toy network shape: narrow, three pyramid levels' worth of routing
/// and a 2-attribute head.
pub fn toy_branch_config() -> BranchConfig {
    BranchConfig {
        channels: 16,
        tower_depth: 1,
        min_level: 3,
        max_level: 7,
        dense_width: 16,
        attention_bases: 4,
        embed_channels: EmbeddingLayout::new(16, 4, HeadConfig::default().attributes).width(),
        size_divisibility: 4,
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tasks: Task::ALL.to_vec(),
            steps: 200,
            learning_rate: 0.01,
            seed: 0,
            branch: toy_branch_config(),
            head: HeadConfig::default(),
            loss_weights: LossWeights::default(),
            routing: RoutingMode::Learned,
            scenes: 4,
            scene: SceneConfig::default(),
            log_every: 50,
            grad_clip: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn net_config(&self) -> NetConfig {
        let mut tasks = self.tasks.clone();
        tasks.sort_unstable();
        tasks.dedup();
        NetConfig {
            branch: self.branch.clone(),
            head: self.head.clone(),
            tasks,
            routing: self.routing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(arg_err("TrainConfig", "at least one task must be enabled"));
        }
        if !(self.learning_rate > 0.0) || self.scenes == 0 || self.log_every == 0 {
            return Err(arg_err("TrainConfig", "learning rate, scenes and log interval must be positive"));
        }
        self.scene.validate()?;
        self.net_config().validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seed of training scene `i`.
    pub fn scene_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }

    /// Seed of held-out scene `i`, disjoint from the training seeds.
    pub fn eval_scene_seed(&self, i: usize) -> u64 {
        self.scene_seed(i).wrapping_add(1 << 40)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub components: LossComponents,
}

/// Primary routing scores at one step, indexed `[task][level][channel]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingLog {
    pub step: usize,
    pub instance: Vec<Vec<Vec<f64>>>,
    pub dense: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    /// A non-finite loss stopped training; the checkpoint holds the last
    /// parameters that gave a finite loss.
    Aborted { step: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub status: TrainStatus,
    pub steps_completed: usize,
    pub trace: Vec<TraceRow>,
    pub routing: Vec<RoutingLog>,
    pub final_metrics: Option<EvalMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub step: usize,
    pub params: Vec<(String, Vec<usize>)>,
}

pub const CHECKPOINT_META: &str = "checkpoint.json";
pub const CHECKPOINT_PARAMS: &str = "params.bin";

pub fn save_checkpoint(dir: &Path, config: &TrainConfig, step: usize, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        config: config.clone(),
        step,
        params: store
            .ids()
            .map(|id| (store.name(id).to_string(), store.get(id).shape().to_vec()))
            .collect(),
    };
    fs::write(dir.join(CHECKPOINT_META), serde_json::to_vec_pretty(&meta)?)?;
    store.save(&dir.join(CHECKPOINT_PARAMS))
}

/// Rebuilds the network from the stored config and loads its weights.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainConfig, ToyNet)> {
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join(CHECKPOINT_META))?)?;
    let mut net = ToyNet::new(meta.config.net_config(), meta.config.seed)?;
    if net.store.names() != meta.params.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>() {
        return Err(Error::Format(format!("{}: parameter names differ from the config", dir.display())));
    }
    net.store.load(&dir.join(CHECKPOINT_PARAMS))?;
    Ok((meta.config, net))
}

fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let names = LossComponents::<f64>::default().named().map(|(n, _)| n);
    writeln!(f, "step,total,{}", names.join(","))?;
    for r in trace {
        let vals: Vec<String> = r.components.named().iter().map(|(_, v)| format!("{v:.12e}")).collect();
        writeln!(f, "{},{:.12e},{}", r.step, r.total, vals.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// `[level][task][channel] → [task][level][channel]`.
fn by_task(scores: &[Vec<crate::numerics::Tensor>], tasks: usize) -> Vec<Vec<Vec<f64>>> {
    (0..tasks)
        .map(|t| {
            scores
                .iter()
                .filter_map(|level| level.get(t).map(|s| s.data().to_vec()))
                .collect()
        })
        .collect()
}

/// Output locations of a run.
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint")
    }
    pub fn trace(&self) -> PathBuf {
        self.dir.join("trace.csv")
    }
    pub fn routing(&self) -> PathBuf {
        self.dir.join("routing_scores.json")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("train_report.json")
    }
}

/// Runs SGD and returns the report; with `out_dir`, also writes the
/// checkpoint, CSV trace, routing log and JSON report there.
pub fn train_toy(config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainReport> {
    config.validate()?;
    let mut net = ToyNet::new(config.net_config(), config.seed)?;
    let scenes = (0..config.scenes)
        .map(|i| gen_scene(config.scene_seed(i), &config.scene))
        .collect::<Result<Vec<_>>>()?;
    let targets = scenes
        .iter()
        .map(|s| SceneTargets::new(s, &config.branch))
        .collect::<Result<Vec<_>>>()?;
    let tasks = net.config.tasks.len();
    let mut trace = Vec::with_capacity(config.steps);
    let mut routing = Vec::new();
    let mut last_good = net.store.clone();
    let mut last_good_step = 0;
    let mut status = TrainStatus::Completed;

    for step in 0..config.steps {
        let t = &targets[step % targets.len()];
        let tape = Tape::new();
        let bound = net.store.bind(&tape);
        let out = net.forward(&tape, &net.bind(&bound), t)?;
        let total = match total_loss_var(&tape, &out.losses, &config.loss_weights) {
            Ok(v) => v,
            Err(Error::NonFinite(reason)) => {
                status = TrainStatus::Aborted { step, reason };
                break;
            }
            Err(e) => return Err(e),
        };
        let value = total.item()?;
        if !value.is_finite() {
            status = TrainStatus::Aborted {
                step,
                reason: format!("total loss is {value}"),
            };
            break;
        }
        let mut components = LossComponents::<f64>::default();
        {
            let c = &mut components;
            let slots: [(&mut f64, &Option<crate::numerics::Var<'_>>); 9] = [
                (&mut c.fcos, &out.losses.fcos),
                (&mut c.ctr, &out.losses.ctr),
                (&mut c.dim, &out.losses.dim),
                (&mut c.ori, &out.losses.ori),
                (&mut c.loc, &out.losses.loc),
                (&mut c.attr, &out.losses.attr),
                (&mut c.mask, &out.losses.mask),
                (&mut c.pano, &out.losses.pano),
                (&mut c.depth, &out.losses.depth),
            ];
            for (slot, v) in slots {
                if let Some(v) = v {
                    *slot = v.item()?;
                }
            }
        }
        trace.push(TraceRow {
            step,
            total: value,
            components,
        });
        if step % config.log_every == 0 || step + 1 == config.steps {
            if net.config.routed() {
                routing.push(RoutingLog {
                    step,
                    instance: by_task(&out.instance_scores, tasks),
                    dense: by_task(&out.dense_scores, tasks),
                });
            }
        }
        let grads = tape.backward(total)?;
        last_good.clone_from(&net.store);
        last_good_step = step;
        let ids: Vec<_> = net.store.ids().collect();
        let mut scale = 1.0;
        if let Some(clip) = config.grad_clip {
            let norm = ids
                .iter()
                .filter_map(|&id| grads.raw(bound[id]))
                .flat_map(|g| g.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        for id in ids {
            if let Some(g) = grads.raw(bound[id]) {
                let lr = config.learning_rate * scale;
                for (w, g) in net.store.get_mut(id).data_mut().iter_mut().zip(g) {
                    *w -= lr * g;
                }
            }
        }
    }

    let steps_completed = trace.len();
    let final_metrics = if matches!(status, TrainStatus::Completed) {
        Some(evaluate_scenes(&net, &scenes)?.0)
    } else {
        None
    };
    let report = TrainReport {
        config: config.clone(),
        status,
        steps_completed,
        trace,
        routing,
        final_metrics,
    };
    if let Some(dir) = out_dir {
        let outs = TrainOutputs { dir: dir.to_path_buf() };
        fs::create_dir_all(dir)?;
        match report.status {
            TrainStatus::Completed => save_checkpoint(&outs.checkpoint(), config, steps_completed, &net.store)?,
            TrainStatus::Aborted { .. } => save_checkpoint(&outs.checkpoint(), config, last_good_step, &last_good)?,
        }
        write_trace_csv(&outs.trace(), &report.trace)?;
        fs::write(outs.routing(), serde_json::to_vec_pretty(&report.routing)?)?;
        fs::write(outs.report(), serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(report)
}

/// First `t` with `loss[t + window] >= loss[t]`, if any.
pub fn first_non_decrease(losses: &[f64], window: usize) -> Option<usize> {
    (0..losses.len().saturating_sub(window)).find(|&t| !(losses[t + window] < losses[t]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(tasks: Vec<Task>, steps: usize) -> TrainConfig {
        TrainConfig {
            tasks,
            steps,
            scenes: 1,
            scene: SceneConfig {
                height: 64,
                width: 128,
                ..Default::default()
            },
            branch: BranchConfig {
                max_level: 5,
                ..toy_branch_config()
            },
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small(vec![Task::Seg, Task::Depth], 4);
        let a = train_toy(&cfg, None).unwrap();
        let b = train_toy(&cfg, None).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.routing, b.routing);
    }

    #[test]
    fn pass_through_matches_disabled() {
        let mut cfg = small(Task::ALL.to_vec(), 5);
        cfg.routing = RoutingMode::Disabled;
        let a = train_toy(&cfg, None).unwrap();
        cfg.routing = RoutingMode::PassThrough;
        let b = train_toy(&cfg, None).unwrap();
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert!((x.total - y.total).abs() <= 1e-9);
        }
    }

    #[test]
    fn nan_aborts_with_checkpoint() {
        let mut cfg = small(vec![Task::Depth], 30);
        cfg.learning_rate = 1e200;
        cfg.grad_clip = None;
        let dir = tempfile::tempdir().unwrap();
        let r = train_toy(&cfg, Some(dir.path())).unwrap();
        assert!(matches!(r.status, TrainStatus::Aborted { .. }), "{:?}", r.status);
        let (_, net) = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
        assert!(net.store.ids().all(|id| net.store.get(id).is_finite()));
    }

    #[test]
    fn checkpoint_round_trip_and_outputs() {
        let cfg = small(Task::ALL.to_vec(), 3);
        let dir = tempfile::tempdir().unwrap();
        let r = train_toy(&cfg, Some(dir.path())).unwrap();
        assert_eq!(r.status, TrainStatus::Completed);
        let outs = TrainOutputs { dir: dir.path().to_path_buf() };
        let csv = fs::read_to_string(outs.trace()).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("step,total,fcos,ctr,dim,ori,loc,attr,mask,pano,depth"));
        let logs: Vec<RoutingLog> = serde_json::from_slice(&fs::read(outs.routing()).unwrap()).unwrap();
        assert_eq!(logs[0].dense.len(), 3);
        assert_eq!(logs[0].dense[0].len(), 3);
        let (c2, net) = load_checkpoint(&outs.checkpoint()).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(net.store.len(), ToyNet::new(cfg.net_config(), cfg.seed).unwrap().store.len());
    }

    #[test]
    fn window_check() {
        assert_eq!(first_non_decrease(&[3.0, 2.0, 1.0, 0.5], 2), None);
        assert_eq!(first_non_decrease(&[3.0, 2.0, 3.0, 0.5], 2), Some(0));
    }
}
