//! Python bindings: tensors, the rank-1 dynamic operators, camera geometry,
//! metrics and the toy harness entry points.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use twinbranch::dynamic_ops::{self, DR1ConvLayer, PositionKernels, Rank1Factors};
use twinbranch::geometry;
use twinbranch::harness::bench::{bench_dr1conv, BenchConfig};
use twinbranch::harness::model::parse_tasks;
use twinbranch::harness::scene::{gen_scene, taxonomy, SceneConfig};
use twinbranch::harness::train::{train_toy, TrainConfig};
use twinbranch::harness::verify::{run_verification, VerifyOptions};
use twinbranch::heads::{self, LossComponents, LossWeights};
use twinbranch::metrics::{self, PanopticMap};
use twinbranch::numerics::Tensor;

fn err(e: twinbranch::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Dense row-major f64 array.
#[pyclass(name = "Tensor", module = "twinbranch_py", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: Tensor::new(shape, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn ones(shape: Vec<usize>) -> Self {
        Self {
            inner: Tensor::ones(&shape),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (shape, seed, lo = -1.0, hi = 1.0))]
    fn uniform(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            inner: Tensor::rand_uniform(&mut rng, &shape, lo, hi),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.data().len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

impl From<Tensor> for PyTensor {
    fn from(inner: Tensor) -> Self {
        Self { inner }
    }
}

#[pyfunction]
fn rank1_modulate(w: &PyTensor, a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    dynamic_ops::rank1_modulate(&w.inner, &a.inner, &b.inner).map(Into::into).map_err(err)
}

#[pyfunction]
fn dr1_linear(w: &PyTensor, x: &PyTensor, a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    dynamic_ops::dr1_linear(&w.inner, &x.inner, &a.inner, &b.inner).map(Into::into).map_err(err)
}

fn factors(a: &PyTensor, b: &PyTensor) -> PyResult<Rank1Factors> {
    Rank1Factors::new(a.inner.clone(), b.inner.clone()).map_err(err)
}

/// Rank-1 dynamic convolution of a `C×H×W` map.
#[pyfunction]
#[pyo3(signature = (x, a, b, weight, bias = None))]
fn dr1conv(x: &PyTensor, a: &PyTensor, b: &PyTensor, weight: &PyTensor, bias: Option<&PyTensor>) -> PyResult<PyTensor> {
    let layer = DR1ConvLayer::new(weight.inner.clone(), bias.map(|t| t.inner.clone())).map_err(err)?;
    dynamic_ops::dr1conv(&x.inner, &factors(a, b)?, &layer).map(Into::into).map_err(err)
}

/// The same operator with one materialized kernel per output position.
#[pyfunction]
fn dense_dynamic_conv(x: &PyTensor, a: &PyTensor, b: &PyTensor, weight: &PyTensor) -> PyResult<PyTensor> {
    let f = factors(a, b)?;
    let kernels = PositionKernels::Rank1 {
        weight: &weight.inner,
        factors: &f,
    };
    dynamic_ops::oracle_dense_dynamic_conv(&x.inner, &kernels).map(Into::into).map_err(err)
}

#[pyclass(name = "CameraIntrinsics", module = "twinbranch_py", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyCamera {
    inner: geometry::CameraIntrinsics,
}

#[pymethods]
impl PyCamera {
    #[new]
    fn new(fx: f64, fy: f64, u0: f64, v0: f64) -> PyResult<Self> {
        Ok(Self {
            inner: geometry::CameraIntrinsics::new(fx, fy, u0, v0).map_err(err)?,
        })
    }

    #[getter]
    fn fx(&self) -> f64 {
        self.inner.fx
    }

    #[getter]
    fn fy(&self) -> f64 {
        self.inner.fy
    }

    #[getter]
    fn u0(&self) -> f64 {
        self.inner.u0
    }

    #[getter]
    fn v0(&self) -> f64 {
        self.inner.v0
    }

    fn project(&self, p: [f64; 3]) -> PyResult<(f64, f64)> {
        geometry::project(&self.inner, p).map_err(err)
    }

    fn backproject(&self, uv: (f64, f64), z: f64) -> PyResult<[f64; 3]> {
        geometry::backproject(&self.inner, uv, z).map_err(err)
    }

    /// Intrinsics after resizing by `s` and cropping at `(x0, y0)`.
    fn resized_and_cropped(&self, s: f64, x0: f64, y0: f64) -> PyResult<Self> {
        Ok(Self {
            inner: geometry::update_intrinsics(&self.inner, s, x0, y0).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        let k = &self.inner;
        format!("CameraIntrinsics(fx={}, fy={}, u0={}, v0={})", k.fx, k.fy, k.u0, k.v0)
    }
}

#[pyclass(name = "Box3D", module = "twinbranch_py", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyBox3D {
    inner: geometry::Box3D,
}

#[pymethods]
impl PyBox3D {
    #[new]
    fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> PyResult<Self> {
        Ok(Self {
            inner: geometry::Box3D::new(center, dims, yaw).map_err(err)?,
        })
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.inner.center
    }

    #[getter]
    fn dims(&self) -> [f64; 3] {
        self.inner.dims
    }

    #[getter]
    fn yaw(&self) -> f64 {
        self.inner.yaw
    }

    fn corners(&self) -> Vec<[f64; 3]> {
        geometry::box_corners(&self.inner).to_vec()
    }

    /// Corner-loss terms of a prediction `(center, dims, alpha)` against
    /// this box as `(loc, dim, ori)`.
    fn corner_terms(&self, center: [f64; 3], dims: [f64; 3], alpha: f64) -> (f64, f64, f64) {
        let t = heads::corner_terms(&heads::Pred3D { center, dims, alpha }, &self.inner);
        (t.loc, t.dim, t.ori)
    }
}

#[pyfunction]
fn nds(map: f64, mtp: [f64; 5]) -> f64 {
    metrics::nds(map, &mtp)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, valid = None))]
fn depth_metrics<'py>(py: Python<'py>, pred: Vec<f64>, gt: Vec<f64>, valid: Option<Vec<bool>>) -> PyResult<Bound<'py, PyDict>> {
    let valid = valid.unwrap_or_else(|| vec![true; gt.len()]);
    let m = metrics::depth_metrics(&pred, &gt, &valid).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("abs_rel", m.abs_rel)?;
    d.set_item("delta1", m.delta1)?;
    d.set_item("delta2", m.delta2)?;
    d.set_item("delta3", m.delta3)?;
    d.set_item("rmse", m.rmse)?;
    Ok(d)
}

/// PQ of `(class, instance)` maps over the synthetic taxonomy
/// (stuff: sky, ground; things: car, pedestrian).
#[pyfunction]
fn panoptic_quality<'py>(
    py: Python<'py>,
    height: usize,
    width: usize,
    pred: (Vec<usize>, Vec<usize>),
    gt: (Vec<usize>, Vec<usize>),
) -> PyResult<Bound<'py, PyDict>> {
    let p = PanopticMap::new(height, width, pred.0, pred.1).map_err(err)?;
    let g = PanopticMap::new(height, width, gt.0, gt.1).map_err(err)?;
    let q = metrics::panoptic_quality(&p, &g, &taxonomy()).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("pq", q.pq)?;
    d.set_item("sq", q.sq)?;
    d.set_item("rq", q.rq)?;
    d.set_item("pq_things", q.pq_things)?;
    d.set_item("pq_stuff", q.pq_stuff)?;
    Ok(d)
}

/// Weighted sum of named loss components under the default weights;
/// missing names count as zero.
#[pyfunction]
fn total_loss(components: std::collections::HashMap<String, f64>) -> PyResult<f64> {
    let mut c = LossComponents::default();
    for (name, v) in &components {
        let slot = match name.as_str() {
            "fcos" => &mut c.fcos,
            "ctr" => &mut c.ctr,
            "dim" => &mut c.dim,
            "ori" => &mut c.ori,
            "loc" => &mut c.loc,
            "attr" => &mut c.attr,
            "mask" => &mut c.mask,
            "pano" => &mut c.pano,
            "depth" => &mut c.depth,
            other => return Err(PyValueError::new_err(format!("unknown loss component {other:?}"))),
        };
        *slot = *v;
    }
    heads::total_loss(&c, &LossWeights::default()).map_err(err)
}

/// Byte serialization of a synthetic scene at the default size.
#[pyfunction]
fn scene_bytes<'py>(py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyBytes>> {
    let s = gen_scene(seed, &SceneConfig::default()).map_err(err)?;
    Ok(PyBytes::new(py, &s.to_bytes()))
}

/// Trains the toy network and returns the JSON report.
#[pyfunction]
#[pyo3(signature = (tasks = "seg,depth,det3d", steps = 20, seed = 0, config_json = None, out_dir = None))]
fn train(tasks: &str, steps: usize, seed: u64, config_json: Option<&str>, out_dir: Option<PathBuf>) -> PyResult<String> {
    let mut cfg: TrainConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => TrainConfig::default(),
    };
    cfg.tasks = parse_tasks(tasks).map_err(err)?;
    cfg.steps = steps;
    cfg.seed = seed;
    let report = train_toy(&cfg, out_dir.as_deref()).map_err(err)?;
    serde_json::to_string(&report).map_err(json_err)
}

/// Runs the selected acceptance criteria; returns `(passed, report_json)`.
#[pyfunction]
#[pyo3(signature = (criteria = Vec::new(), flip_dr1conv_sign = false))]
fn verify(criteria: Vec<u32>, flip_dr1conv_sign: bool) -> PyResult<(bool, String)> {
    let r = run_verification(&VerifyOptions {
        flip_dr1conv_sign,
        criteria,
    })
    .map_err(err)?;
    Ok((r.passed, serde_json::to_string(&r).map_err(json_err)?))
}

#[pyfunction]
#[pyo3(name = "bench", signature = (c = 64, h = 128, w = 128, kernel = 3, repeats = 3))]
fn bench_json(c: usize, h: usize, w: usize, kernel: usize, repeats: usize) -> PyResult<String> {
    let r = bench_dr1conv(&BenchConfig {
        channels: c,
        height: h,
        width: w,
        kernel,
        repeats,
        seed: 0,
    })
    .map_err(err)?;
    serde_json::to_string(&r).map_err(json_err)
}

#[pymodule]
fn twinbranch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyBox3D>()?;
    m.add_function(wrap_pyfunction!(rank1_modulate, m)?)?;
    m.add_function(wrap_pyfunction!(dr1_linear, m)?)?;
    m.add_function(wrap_pyfunction!(dr1conv, m)?)?;
    m.add_function(wrap_pyfunction!(dense_dynamic_conv, m)?)?;
    m.add_function(wrap_pyfunction!(nds, m)?)?;
    m.add_function(wrap_pyfunction!(depth_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(panoptic_quality, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(scene_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(bench_json, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrappers_match_core() {
        let x = PyTensor::uniform(vec![2, 4, 5], 1, -1.0, 1.0);
        let a = PyTensor::uniform(vec![2, 4, 5], 2, -1.0, 1.0);
        let b = PyTensor::uniform(vec![2, 4, 5], 3, -1.0, 1.0);
        let w = PyTensor::uniform(vec![2, 2, 3, 3], 4, -1.0, 1.0);
        let fast = dr1conv(&x, &a, &b, &w, None).unwrap();
        let slow = dense_dynamic_conv(&x, &a, &b, &w).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-12);
        assert_eq!(fast.shape(), vec![2, 4, 5]);
    }

    #[test]
    fn total_loss_uses_default_weights() {
        let c = [("dim".to_string(), 1.0), ("loc".to_string(), 1.0)].into_iter().collect();
        assert_eq!(total_loss(c).unwrap(), 0.4 * 2.0 + 0.4 * 0.5);
    }

    #[test]
    fn camera_round_trip() {
        let k = PyCamera::new(700.0, 710.0, 320.0, 180.0).unwrap();
        let p = k.backproject(k.project([1.0, -0.5, 12.0]).unwrap(), 12.0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] + 0.5).abs() < 1e-12);
    }
}
