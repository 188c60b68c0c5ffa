//! Pinhole camera math and 3D boxes.
//!
//! Camera frame: `x` right, `y` down, `z` forward. Yaw rotates about `y`;
//! at yaw 0 a box's length runs along `+x`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub u0: f64,
    pub v0: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, u0: f64, v0: f64) -> Result<Self> {
        let k = Self { fx, fy, u0, v0 };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.u0.is_finite() || !self.v0.is_finite() {
            return Err(arg_err("CameraIntrinsics", format!("invalid camera {self:?}")));
        }
        Ok(())
    }

    /// Row-major 3×3 matrix `[[fx,0,u0],[0,fy,v0],[0,0,1]]`.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.u0], [0.0, self.fy, self.v0], [0.0, 0.0, 1.0]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    /// `(x, y, z)` in meters, camera frame.
    pub center: [f64; 3],
    /// `(h, w, l)` in meters.
    pub dims: [f64; 3],
    pub yaw: f64,
    #[serde(default)]
    pub attribute: Option<usize>,
}

impl Box3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Result<Self> {
        let b = Self {
            center,
            dims,
            yaw,
            attribute: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| !(d > 0.0)) || !(self.center[2] > 0.0) {
            return Err(arg_err("Box3D", format!("dims must be > 0 and z > 0: {self:?}")));
        }
        Ok(())
    }
}

fn require_depth(op: &'static str, z: f64) -> Result<()> {
    if !(z > 0.0) {
        return Err(arg_err(op, format!("depth {z} must be positive")));
    }
    Ok(())
}

/// `(u, v) = (fx·x/z + u0, fy·y/z + v0)`.
pub fn project(k: &CameraIntrinsics, p: [f64; 3]) -> Result<(f64, f64)> {
    require_depth("project", p[2])?;
    Ok((k.fx * p[0] / p[2] + k.u0, k.fy * p[1] / p[2] + k.v0))
}

pub fn backproject(k: &CameraIntrinsics, uv: (f64, f64), z: f64) -> Result<[f64; 3]> {
    require_depth("backproject", z)?;
    Ok([(uv.0 - k.u0) * z / k.fx, (uv.1 - k.v0) * z / k.fy, z])
}

/// Intrinsics after resizing the image by `s` and then cropping at
/// `(x0, y0)` in the resized frame.
pub fn update_intrinsics(k: &CameraIntrinsics, s: f64, x0: f64, y0: f64) -> Result<CameraIntrinsics> {
    if !(s > 0.0) {
        return Err(arg_err("update_intrinsics", format!("scale {s} must be positive")));
    }
    Ok(CameraIntrinsics {
        fx: k.fx * s,
        fy: k.fy * s,
        u0: k.u0 * s - x0,
        v0: k.v0 * s - y0,
    })
}

/// Unit-extent corner template `(±l/2, ±h/2, ±w/2)` signs in the box frame.
///
/// Corners 0..4 are the bottom face (`+y`, since `y` points down), 4..8 the
/// top face; each face runs front-left, front-right, back-right, back-left
/// where front is `+l` and left is `+w`.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [0.5, 0.5, 0.5],
    [0.5, 0.5, -0.5],
    [-0.5, 0.5, -0.5],
    [-0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5],
    [0.5, -0.5, -0.5],
    [-0.5, -0.5, -0.5],
    [-0.5, -0.5, 0.5],
];

/// The eight corners of `b`, ordered as [`CORNER_SIGNS`].
///
/// A box-frame offset `(dl, dh, dw)` maps to camera frame as
/// `x = cos·dl + sin·dw`, `y = dh`, `z = −sin·dl + cos·dw` plus the center.
pub fn box_corners(b: &Box3D) -> [[f64; 3]; 8] {
    let [h, w, l] = b.dims;
    let (s, c) = b.yaw.sin_cos();
    CORNER_SIGNS.map(|[sl, sh, sw]| {
        let (dl, dh, dw) = (sl * l, sh * h, sw * w);
        [
            b.center[0] + c * dl + s * dw,
            b.center[1] + dh,
            b.center[2] - s * dl + c * dw,
        ]
    })
}

/// Global yaw from observation angle: `yaw = α + atan2(x, z)`.
pub fn alpha_to_yaw(alpha: f64, center: [f64; 3]) -> f64 {
    alpha + center[0].atan2(center[2])
}

pub fn yaw_to_alpha(yaw: f64, center: [f64; 3]) -> f64 {
    yaw - center[0].atan2(center[2])
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// A crop of `ratio` times the image size, resized back to full size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeCrop {
    /// Crop side as a fraction of the image side, in `[0.5, 1]`.
    pub ratio: f64,
    /// Crop window in original pixels.
    pub crop_x: f64,
    pub crop_y: f64,
    pub crop_w: f64,
    pub crop_h: f64,
    /// Equivalent resize-then-crop parameters for [`update_intrinsics`]:
    /// resize by `s = 1/ratio`, then crop at `(x0, y0)`.
    pub s: f64,
    pub x0: f64,
    pub y0: f64,
}

/// Draws a crop whose side ratio is uniform in `[0.5, 1]`, placed uniformly
/// inside an image of `width × height` pixels.
pub fn relative_crop_params<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize) -> RelativeCrop {
    let ratio = rng.gen_range(0.5..=1.0);
    relative_crop_at(ratio, rng.gen::<f64>(), rng.gen::<f64>(), width, height)
}

/// Crop with the given ratio and placement fractions `fx, fy ∈ [0, 1]`.
pub fn relative_crop_at(ratio: f64, fx: f64, fy: f64, width: usize, height: usize) -> RelativeCrop {
    let (w, h) = (width as f64, height as f64);
    let (crop_w, crop_h) = (ratio * w, ratio * h);
    let crop_x = fx * (w - crop_w);
    let crop_y = fy * (h - crop_h);
    let s = 1.0 / ratio;
    RelativeCrop {
        ratio,
        crop_x,
        crop_y,
        crop_w,
        crop_h,
        s,
        x0: crop_x * s,
        y0: crop_y * s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn unit_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn projection_basics() {
        let k = CameraIntrinsics::new(700.0, 650.0, 320.0, 180.0).unwrap();
        assert_eq!(project(&k, [0.0, 0.0, 7.0]).unwrap(), (320.0, 180.0));
        assert_eq!(project(&unit_camera(), [2.0, 3.0, 1.0]).unwrap(), (2.0, 3.0));
        assert!(project(&k, [1.0, 1.0, 0.0]).is_err());
        assert!(project(&k, [1.0, 1.0, -2.0]).is_err());
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn backprojection_basics() {
        let k = CameraIntrinsics::new(700.0, 650.0, 320.0, 180.0).unwrap();
        assert_eq!(backproject(&k, (320.0, 180.0), 4.0).unwrap(), [0.0, 0.0, 4.0]);
        assert_eq!(backproject(&unit_camera(), (2.0, 3.0), 1.0).unwrap(), [2.0, 3.0, 1.0]);
        assert!(backproject(&k, (0.0, 0.0), 0.0).is_err());
    }

    #[test]
    fn intrinsics_update_basics() {
        let k = CameraIntrinsics::new(700.0, 650.0, 320.0, 180.0).unwrap();
        assert_eq!(update_intrinsics(&k, 1.0, 0.0, 0.0).unwrap(), k);
        let half = update_intrinsics(&k, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(half.fx, 350.0);
        assert_eq!(half.fy, 325.0);
        assert!(update_intrinsics(&k, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn unit_cube_corners() {
        let b = Box3D::new([0.0, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        for (c, s) in box_corners(&b).iter().zip(CORNER_SIGNS) {
            assert_eq!(c, &[s[0], s[1], 10.0 + s[2]]);
        }
    }

    #[test]
    fn quarter_turn_swaps_footprint() {
        let b = Box3D::new([0.0, 0.0, 10.0], [1.0, 2.0, 4.0], FRAC_PI_2).unwrap();
        let cs = box_corners(&b);
        let xs = cs.iter().map(|c| c[0]);
        let zs = cs.iter().map(|c| c[2]);
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = it.collect();
            v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert!((span(&mut xs.into_iter()) - 2.0).abs() < 1e-12);
        assert!((span(&mut zs.into_iter()) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_yaw_examples() {
        assert_eq!(alpha_to_yaw(0.3, [0.0, 1.0, 5.0]), 0.3);
        assert!((alpha_to_yaw(0.0, [3.0, 0.0, 3.0]) - FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        for a in [-7.0, -PI, 0.0, PI, 4.0, 12.0] {
            let w = wrap_angle(a);
            assert!(w > -PI && w <= PI);
            let turns = (a - w) / (2.0 * PI);
            assert!((turns - turns.round()).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_crop_examples() {
        let full = relative_crop_at(1.0, 0.7, 0.3, 256, 128);
        assert_eq!((full.crop_x, full.crop_y, full.x0, full.y0, full.s), (0.0, 0.0, 0.0, 0.0, 1.0));
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(relative_crop_params(&mut a, 256, 128), relative_crop_params(&mut b, 256, 128));
        for _ in 0..1000 {
            let c = relative_crop_params(&mut a, 256, 128);
            assert!((0.5..=1.0).contains(&c.ratio));
            assert!(c.crop_x >= 0.0 && c.crop_y >= 0.0);
            assert!(c.crop_x + c.crop_w <= 256.0 + 1e-9);
            assert!(c.crop_y + c.crop_h <= 128.0 + 1e-9);
        }
    }

    #[test]
    fn intrinsics_json_field_names() {
        let k = CameraIntrinsics::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let j = serde_json::to_string(&k).unwrap();
        assert_eq!(j, r#"{"fx":1.0,"fy":2.0,"u0":3.0,"v0":4.0}"#);
    }
}
