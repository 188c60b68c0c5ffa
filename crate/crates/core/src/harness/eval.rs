//! Held-out evaluation with ground-truth proposals, plus PGM/PPM renders.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::branches::BASIS_STRIDE;
use crate::error::Result;
use crate::heads::MAX_DEPTH;
use crate::metrics::{
    depth_metrics, mean_ap, nds, panoptic_quality, summarize_pq, tp_errors, ClassPq, DepthMetrics, DetectionResult,
    GroundTruth3D, PanopticMap, PanopticQuality, TpErrors, DISTANCE_THRESHOLDS,
};
use crate::numerics::{Tape, Tensor};

use super::model::{SceneTargets, ToyNet};
use super::scene::{gen_scene, taxonomy, SyntheticScene};
use super::train::load_checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub map: f64,
    /// AP per distance threshold, in [`DISTANCE_THRESHOLDS`] order.
    pub ap: Vec<f64>,
    pub tp_errors: TpErrors,
    pub nds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub scenes: usize,
    pub panoptic: Option<PanopticQuality>,
    pub detection: Option<DetectionMetrics>,
    pub depth: Option<DepthMetrics>,
}

/// Predicted outputs of one scene at image resolution.
pub struct ScenePrediction {
    pub panoptic: Option<PanopticMap>,
    pub depth: Option<Tensor>,
    pub detections: Vec<DetectionResult>,
}

/// Thing columns become instances of their object's class; each pixel reads
/// the nearest basis cell.
fn panoptic_map(scene: &SyntheticScene, logits: &Tensor, owners: &[usize]) -> Result<PanopticMap> {
    let (n, bh, bw) = logits.dims3()?;
    let (h, w) = (scene.height(), scene.width());
    let mut class = vec![0; h * w];
    let mut instance = vec![0; h * w];
    for v in 0..h {
        for u in 0..w {
            let i = ((v as f64 / BASIS_STRIDE as f64).round() as usize).min(bh - 1);
            let j = ((u as f64 / BASIS_STRIDE as f64).round() as usize).min(bw - 1);
            let mut best = 0;
            for c in 1..n {
                if logits.at3(c, i, j) > logits.at3(best, i, j) {
                    best = c;
                }
            }
            let p = v * w + u;
            if best < 2 {
                class[p] = best;
            } else {
                let k = owners[best - 2];
                class[p] = scene.objects[k].class_id;
                instance[p] = scene.objects[k].instance_id;
            }
        }
    }
    PanopticMap::new(h, w, class, instance)
}

pub fn predict(net: &ToyNet, scene: &SyntheticScene, sample: usize) -> Result<ScenePrediction> {
    let targets = SceneTargets::new(scene, &net.config.branch)?;
    let tape = Tape::new();
    let bound = net.store.bind_frozen(&tape);
    let out = net.forward(&tape, &net.bind(&bound), &targets)?;
    let p = out.predictions;
    let panoptic = match &p.panoptic {
        Some((logits, owners)) => Some(panoptic_map(scene, logits, owners)?),
        None => None,
    };
    let mut detections = Vec::new();
    for (k, pred) in p.boxes.iter().enumerate() {
        if let Some((pred, attr)) = pred {
            // Behind the camera: no valid box, so the object counts as missed.
            if !(pred.center[2] > 0.0) {
                continue;
            }
            let mut box3d = pred.to_box()?;
            box3d.attribute = *attr;
            detections.push(DetectionResult {
                box3d,
                score: 1.0,
                class_id: scene.objects[k].class_id,
                sample,
            });
        }
    }
    Ok(ScenePrediction {
        panoptic,
        depth: p.depth,
        detections,
    })
}

/// Metrics over `scenes`; PQ counts and detections are pooled across scenes.
pub fn evaluate_scenes(net: &ToyNet, scenes: &[SyntheticScene]) -> Result<(EvalMetrics, Vec<ScenePrediction>)> {
    let tax = taxonomy();
    let mut pq_counts = vec![ClassPq::default(); tax.num_classes()];
    let mut have_pq = false;
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    let (mut dp, mut dg) = (Vec::new(), Vec::new());
    let mut preds = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let pred = predict(net, scene, i)?;
        if let Some(m) = &pred.panoptic {
            have_pq = true;
            let q = panoptic_quality(m, &scene.panoptic, &tax)?;
            for (acc, c) in pq_counts.iter_mut().zip(&q.per_class) {
                acc.merge(c);
            }
        }
        if let Some(d) = &pred.depth {
            dp.extend_from_slice(d.data());
            dg.extend_from_slice(scene.depth.data());
        }
        dets.extend(pred.detections.iter().cloned());
        gts.extend(scene.objects.iter().map(|o| GroundTruth3D {
            box3d: o.box3d,
            class_id: o.class_id,
            sample: i,
        }));
        preds.push(pred);
    }
    let detection = net.config.task_index(super::model::Task::Det3d).map(|_| {
        let ap = DISTANCE_THRESHOLDS
            .iter()
            .map(|&t| mean_ap(&dets, &gts, &[t]))
            .collect::<Vec<_>>();
        let map = mean_ap(&dets, &gts, &DISTANCE_THRESHOLDS);
        let errs = tp_errors(&dets, &gts);
        DetectionMetrics {
            map,
            ap,
            tp_errors: errs,
            nds: nds(map, &errs.as_array()),
        }
    });
    let depth = if dp.is_empty() {
        None
    } else {
        Some(depth_metrics(&dp, &dg, &vec![true; dg.len()])?)
    };
    Ok((
        EvalMetrics {
            scenes: scenes.len(),
            panoptic: have_pq.then(|| summarize_pq(pq_counts, &tax)),
            detection,
            depth,
        },
        preds,
    ))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    f.flush()?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(gray)?;
    f.flush()?;
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_rgb(image: &Tensor) -> Result<Vec<u8>> {
    let (_, h, w) = image.dims3()?;
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_u8(image.data()[c * h * w + p]));
        }
    }
    Ok(out)
}

/// Stuff in fixed colors; each instance a hue of its class.
pub fn panoptic_rgb(m: &PanopticMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(3 * m.class.len());
    for (&c, &i) in m.class.iter().zip(&m.instance) {
        let rgb = match c {
            0 => [110, 160, 230],
            1 => [90, 90, 90],
            _ => {
                let base: [u16; 3] = if c == 2 { [220, 60, 40] } else { [60, 80, 220] };
                let t = (i as u16 * 37) % 80;
                [base[0].saturating_sub(t), (base[1] + t).min(255), base[2].saturating_sub(t / 2)].map(|v| v as u8)
            }
        };
        out.extend(rgb);
    }
    out
}

/// Near is bright; [`MAX_DEPTH`] is black. Log scale.
pub fn depth_gray(depth: &[f64]) -> Vec<u8> {
    depth
        .iter()
        .map(|&d| to_u8(1.0 - d.max(1.0).ln() / MAX_DEPTH.ln()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub scene_seeds: Vec<u64>,
    pub metrics: EvalMetrics,
    pub renders: Vec<PathBuf>,
}

/// Evaluates a checkpoint on `n` held-out scenes, writing `eval_report.json`
/// and renders of the first scenes into `out_dir`.
pub fn eval_checkpoint(checkpoint: &Path, n: usize, out_dir: &Path, max_renders: usize) -> Result<EvalReport> {
    let (cfg, net) = load_checkpoint(checkpoint)?;
    let seeds: Vec<u64> = (0..n).map(|i| cfg.eval_scene_seed(i)).collect();
    let scenes = seeds.iter().map(|&s| gen_scene(s, &cfg.scene)).collect::<Result<Vec<_>>>()?;
    let (metrics, preds) = evaluate_scenes(&net, &scenes)?;
    fs::create_dir_all(out_dir)?;
    let mut renders = Vec::new();
    for (i, (scene, pred)) in scenes.iter().zip(&preds).enumerate().take(max_renders) {
        let (h, w) = (scene.height(), scene.width());
        let mut emit_ppm = |name: String, rgb: Vec<u8>| -> Result<()> {
            let path = out_dir.join(name);
            write_ppm(&path, w, h, &rgb)?;
            renders.push(path);
            Ok(())
        };
        emit_ppm(format!("scene{i:03}_image.ppm"), image_rgb(&scene.image)?)?;
        emit_ppm(format!("scene{i:03}_panoptic_gt.ppm"), panoptic_rgb(&scene.panoptic))?;
        if let Some(m) = &pred.panoptic {
            emit_ppm(format!("scene{i:03}_panoptic_pred.ppm"), panoptic_rgb(m))?;
        }
        let mut emit_pgm = |name: String, d: &[f64]| -> Result<()> {
            let path = out_dir.join(name);
            write_pgm(&path, w, h, &depth_gray(d))?;
            renders.push(path);
            Ok(())
        };
        emit_pgm(format!("scene{i:03}_depth_gt.pgm"), scene.depth.data())?;
        if let Some(d) = &pred.depth {
            emit_pgm(format!("scene{i:03}_depth_pred.pgm"), d.data())?;
        }
    }
    let report = EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        scene_seeds: seeds,
        metrics,
        renders,
    };
    fs::write(out_dir.join("eval_report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::{train_toy, TrainConfig};
    use crate::harness::model::{NetConfig, Task};
    use crate::harness::scene::SceneConfig;

    #[test]
    fn eval_writes_report_and_renders() {
        let cfg = TrainConfig {
            tasks: Task::ALL.to_vec(),
            steps: 2,
            scenes: 1,
            scene: SceneConfig {
                height: 64,
                width: 128,
                ..Default::default()
            },
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        train_toy(&cfg, Some(dir.path())).unwrap();
        let out = dir.path().join("eval");
        let r = eval_checkpoint(&dir.path().join("checkpoint"), 2, &out, 1).unwrap();
        assert_eq!(r.metrics.scenes, 2);
        assert!(r.metrics.panoptic.is_some() && r.metrics.detection.is_some() && r.metrics.depth.is_some());
        assert_eq!(r.renders.len(), 5);
        let ppm = fs::read(&r.renders[0]).unwrap();
        assert!(ppm.starts_with(b"P6\n128 64\n255\n"));
        assert_eq!(ppm.len(), "P6\n128 64\n255\n".len() + 3 * 64 * 128);
        let back: EvalReport = serde_json::from_slice(&fs::read(out.join("eval_report.json")).unwrap()).unwrap();
        assert_eq!(back.scene_seeds, r.scene_seeds);
    }

    #[test]
    fn boxes_behind_the_camera_are_dropped() {
        let mut cfg = NetConfig::tiny(vec![Task::Det3d], crate::routing::RoutingMode::Disabled);
        cfg.head.depth_prior = -1000.0;
        let net = ToyNet::new(cfg, 0).unwrap();
        let scene = gen_scene(3, &SceneConfig { height: 64, width: 96, min_objects: 2, ..Default::default() }).unwrap();
        let pred = predict(&net, &scene, 0).unwrap();
        assert!(pred.detections.is_empty());
        let (m, _) = evaluate_scenes(&net, &[scene]).unwrap();
        assert_eq!(m.detection.unwrap().map, 0.0);
    }

    #[test]
    fn renders_have_expected_sizes() {
        let m = PanopticMap::new(2, 2, vec![0, 1, 2, 3], vec![0, 0, 1, 2]).unwrap();
        assert_eq!(panoptic_rgb(&m).len(), 12);
        assert_eq!(depth_gray(&[1.0, 120.0]), vec![255, 0]);
    }
}
