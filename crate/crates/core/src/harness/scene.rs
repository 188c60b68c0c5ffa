//! Procedural street scenes: textured cuboids on a ground plane seen by a
//! pinhole camera, with per-pixel class, instance and depth labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branches::{Box2D, GtInstance};
use crate::error::{arg_err, Result};
use crate::geometry::{box_corners, project, Box3D, CameraIntrinsics};
use crate::heads::MAX_DEPTH;
use crate::metrics::{PanopticMap, Taxonomy};
use crate::numerics::Tensor;

pub const SKY: usize = 0;
pub const GROUND: usize = 1;
pub const CAR: usize = 2;
pub const PEDESTRIAN: usize = 3;
/// Attributes are rendered as surface brightness.
pub const ATTRIBUTES: [&str; 2] = ["lit", "shaded"];

pub fn taxonomy() -> Taxonomy {
    Taxonomy {
        stuff: vec!["sky".into(), "ground".into()],
        things: vec!["car".into(), "pedestrian".into()],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    /// Relative spread of the focal length across scenes.
    pub focal_jitter: f64,
    pub camera_height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Objects with fewer unoccluded pixels are dropped.
    pub min_visible_px: usize,
    pub depth_range: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 256,
            focal: 180.0,
            focal_jitter: 0.05,
            camera_height: 1.5,
            min_objects: 1,
            max_objects: 6,
            min_visible_px: 40,
            depth_range: (7.0, 35.0),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(arg_err("SceneConfig", format!("{}×{} image is too small", self.height, self.width)));
        }
        if self.min_objects > self.max_objects {
            return Err(arg_err("SceneConfig", "min_objects exceeds max_objects"));
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && hi > lo && hi < MAX_DEPTH) || !(self.focal > 0.0) || !(self.camera_height > 0.0) {
            return Err(arg_err("SceneConfig", "focal, camera height and depth range must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub box3d: Box3D,
    pub box2d: Box2D,
    pub class_id: usize,
    /// Instance id in the panoptic map.
    pub instance_id: usize,
    pub visible_px: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    /// `3×H×W` in `[0, 1]`.
    pub image: Tensor,
    pub intrinsics: CameraIntrinsics,
    pub objects: Vec<SceneObject>,
    pub panoptic: PanopticMap,
    /// `H×W` meters.
    pub depth: Tensor,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.panoptic.height
    }

    pub fn width(&self) -> usize {
        self.panoptic.width
    }

    pub fn gt_instances(&self) -> Vec<GtInstance> {
        self.objects
            .iter()
            .map(|o| GtInstance {
                box2d: o.box2d,
                class_id: o.class_id,
            })
            .collect()
    }

    /// Every rendered buffer, serialized; equal scenes give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.image.to_bytes();
        out.extend(self.depth.to_bytes());
        for v in self.panoptic.class.iter().chain(&self.panoptic.instance) {
            out.extend((*v as u32).to_le_bytes());
        }
        out.extend(serde_json::to_vec(&self.objects).expect("objects serialize"));
        out
    }
}

struct Proposal {
    box3d: Box3D,
    class_id: usize,
    hull: Vec<(f64, f64)>,
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise hull by the monotone chain.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0)
}

fn sample_object(rng: &mut ChaCha8Rng, cfg: &SceneConfig, k: &CameraIntrinsics) -> Option<Proposal> {
    let class_id = if rng.gen_bool(0.6) { CAR } else { PEDESTRIAN };
    let base = if class_id == CAR { [1.5, 1.7, 4.0] } else { [1.75, 0.6, 0.8] };
    let dims = base.map(|d| d * rng.gen_range(0.9..1.1));
    let z = rng.gen_range(cfg.depth_range.0..cfg.depth_range.1);
    let x = rng.gen_range(-0.55..0.55) * z;
    let y = cfg.camera_height - dims[0] / 2.0;
    let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut box3d = Box3D::new([x, y, z], dims, yaw).ok()?;
    box3d.attribute = Some(rng.gen_range(0..ATTRIBUTES.len()));
    let mut uv = Vec::with_capacity(8);
    for c in box_corners(&box3d) {
        if c[2] < 1.0 {
            return None;
        }
        let (u, v) = project(k, c).ok()?;
        if !(u >= 0.0 && v >= 0.0 && u <= cfg.width as f64 - 1.0 && v <= cfg.height as f64 - 1.0) {
            return None;
        }
        uv.push((u, v));
    }
    Some(Proposal {
        box3d,
        class_id,
        hull: convex_hull(uv),
    })
}

fn hash01(a: usize, b: usize, salt: u64) -> f64 {
    let mut h = (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ salt;
    h ^= h >> 31;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f64>,
    depth: Vec<f64>,
    class: Vec<usize>,
    instance: Vec<usize>,
}

fn render_background(cfg: &SceneConfig, k: &CameraIntrinsics, salt: u64) -> Canvas {
    let (h, w) = (cfg.height, cfg.width);
    let mut c = Canvas {
        h,
        w,
        rgb: vec![0.0; 3 * h * w],
        depth: vec![MAX_DEPTH; h * w],
        class: vec![SKY; h * w],
        instance: vec![0; h * w],
    };
    for v in 0..h {
        for u in 0..w {
            let p = v * w + u;
            let dv = v as f64 - k.v0;
            let ground_z = if dv > 0.0 { k.fy * cfg.camera_height / dv } else { f64::INFINITY };
            let color = if ground_z <= MAX_DEPTH {
                c.class[p] = GROUND;
                c.depth[p] = ground_z;
                let gx = (u as f64 - k.u0) * ground_z / k.fx;
                let tile = ((gx.floor() as i64 + ground_z.floor() as i64).rem_euclid(2)) as f64;
                let g = 0.35 + 0.08 * tile + 0.04 * hash01(u, v, salt);
                [g, g, g * 0.95]
            } else {
                let t = v as f64 / h as f64;
                [0.45 + 0.2 * t, 0.6 + 0.15 * t, 0.9]
            };
            for ch in 0..3 {
                c.rgb[ch * h * w + p] = color[ch];
            }
        }
    }
    c
}

fn paint_object(c: &mut Canvas, obj: &Proposal, instance_id: usize, salt: u64) {
    let (mut u0, mut v0, mut u1, mut v1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(u, v) in &obj.hull {
        u0 = u0.min(u);
        v0 = v0.min(v);
        u1 = u1.max(u);
        v1 = v1.max(v);
    }
    let base = if obj.class_id == CAR { [0.75, 0.2, 0.15] } else { [0.2, 0.3, 0.8] };
    let shade = if obj.box3d.attribute == Some(0) { 1.0 } else { 0.55 };
    let n = c.h * c.w;
    for v in v0.ceil() as usize..=(v1.floor() as usize).min(c.h - 1) {
        for u in u0.ceil() as usize..=(u1.floor() as usize).min(c.w - 1) {
            if !inside_hull(&obj.hull, (u as f64, v as f64)) {
                continue;
            }
            let p = v * c.w + u;
            let stripe = if (v / 3) % 2 == 0 { 1.0 } else { 0.85 };
            let noise = 0.05 * hash01(u, v, salt ^ instance_id as u64);
            for ch in 0..3 {
                c.rgb[ch * n + p] = (base[ch] * shade * stripe + noise).min(1.0);
            }
            c.depth[p] = obj.box3d.center[2];
            c.class[p] = obj.class_id;
            c.instance[p] = instance_id;
        }
    }
}

/// Renders far-to-near. Objects left with too few visible pixels are
/// dropped and the scene re-rendered without them.
fn render(cfg: &SceneConfig, k: &CameraIntrinsics, mut objs: Vec<Proposal>, salt: u64) -> (Canvas, Vec<Proposal>, Vec<usize>) {
    objs.sort_by(|a, b| b.box3d.center[2].total_cmp(&a.box3d.center[2]));
    loop {
        let mut c = render_background(cfg, k, salt);
        for (i, o) in objs.iter().enumerate() {
            paint_object(&mut c, o, i + 1, salt);
        }
        let mut visible = vec![0usize; objs.len()];
        for &id in &c.instance {
            if id > 0 {
                visible[id - 1] += 1;
            }
        }
        match visible.iter().position(|&v| v < cfg.min_visible_px) {
            Some(i) => {
                objs.remove(i);
            }
            None => return (c, objs, visible),
        }
    }
}

/// Deterministic in `seed`. Object count is drawn in
/// `min_objects..=max_objects`; placements that leave the image are redrawn
/// a bounded number of times, so crowded scenes may hold fewer.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = cfg.focal * (1.0 + cfg.focal_jitter * rng.gen_range(-1.0..1.0));
    let k = CameraIntrinsics::new(f, f, cfg.width as f64 / 2.0, cfg.height as f64 / 2.0)?;
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objs = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..50 {
            if let Some(o) = sample_object(&mut rng, cfg, &k) {
                objs.push(o);
                break;
            }
        }
    }
    let salt = rng.gen::<u64>();
    let (canvas, objs, visible) = render(cfg, &k, objs, salt);
    let objects = objs
        .iter()
        .zip(visible)
        .enumerate()
        .map(|(i, (o, visible_px))| {
            let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for &(u, v) in &o.hull {
                x1 = x1.min(u);
                y1 = y1.min(v);
                x2 = x2.max(u);
                y2 = y2.max(v);
            }
            SceneObject {
                box3d: o.box3d,
                box2d: [x1, y1, x2, y2],
                class_id: o.class_id,
                instance_id: i + 1,
                visible_px,
            }
        })
        .collect();
    let (h, w) = (cfg.height, cfg.width);
    Ok(SyntheticScene {
        seed,
        image: Tensor::new(vec![3, h, w], canvas.rgb)?,
        intrinsics: k,
        objects,
        panoptic: PanopticMap::new(h, w, canvas.class, canvas.instance)?,
        depth: Tensor::new(vec![h, w], canvas.depth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SceneConfig::default();
        assert_eq!(gen_scene(7, &cfg).unwrap().to_bytes(), gen_scene(7, &cfg).unwrap().to_bytes());
        assert_ne!(gen_scene(7, &cfg).unwrap().to_bytes(), gen_scene(8, &cfg).unwrap().to_bytes());
    }

    #[test]
    fn empty_scene_is_pure_stuff() {
        let cfg = SceneConfig {
            min_objects: 0,
            max_objects: 0,
            ..Default::default()
        };
        let s = gen_scene(1, &cfg).unwrap();
        assert!(s.objects.is_empty());
        assert!(s.panoptic.class.iter().all(|&c| c == SKY || c == GROUND));
        assert!(s.panoptic.instance.iter().all(|&i| i == 0));
        s.panoptic.validate(&taxonomy()).unwrap();
    }

    #[test]
    fn boxes_project_inside_over_many_seeds() {
        let cfg = SceneConfig::default();
        for seed in 0..1000 {
            let s = gen_scene(seed, &cfg).unwrap();
            for o in &s.objects {
                for c in box_corners(&o.box3d) {
                    let (u, v) = project(&s.intrinsics, c).unwrap();
                    assert!(u >= 0.0 && v >= 0.0 && u < cfg.width as f64 && v < cfg.height as f64, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn labels_and_depth_are_consistent() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let s = gen_scene(seed, &cfg).unwrap();
            s.panoptic.validate(&taxonomy()).unwrap();
            assert!(s.depth.data().iter().all(|&d| d > 0.0 && d <= MAX_DEPTH));
            for (p, &id) in s.panoptic.instance.iter().enumerate() {
                if id > 0 {
                    let o = &s.objects[id - 1];
                    assert_eq!(s.depth.data()[p], o.box3d.center[2]);
                    assert_eq!(s.panoptic.class[p], o.class_id);
                }
            }
            for o in &s.objects {
                assert!(o.visible_px >= cfg.min_visible_px);
                assert!(o.box2d[2] > o.box2d[0] && o.box2d[3] > o.box2d[1]);
            }
        }
    }

    #[test]
    fn hull_contains_its_points() {
        let pts = vec![(0.0, 0.0), (4.0, 0.0), (4.0, 3.0), (0.0, 3.0), (2.0, 1.0)];
        let hull = convex_hull(pts);
        assert_eq!(hull.len(), 4);
        assert!(inside_hull(&hull, (2.0, 1.5)));
        assert!(!inside_hull(&hull, (5.0, 1.5)));
    }
}
