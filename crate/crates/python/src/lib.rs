//! Python bindings: camera geometry, single-frame segmentation and alignment,
//! and the full pipeline.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dynafuse::config::RawConfig;
use dynafuse::detection::{read_detections as read_detection_file, BBox};
use dynafuse::geometry::{self, Pixel, Twist};
use dynafuse::imaging::{DepthImage, FramePair, RgbImage};
use dynafuse::odometry::{align_frames, AlignmentParams};
use dynafuse::reconstruction::TrajectoryEntry;
use dynafuse::segmentation::{segment_boxes, AlphaMask, GrabcutParams};
use dynafuse::synthetic::{moving_person_sequence, write_dataset};
use dynafuse::Error;
use nalgebra::{Matrix3, Point3, Vector3};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        Error::InsufficientOverlap(_) | Error::Divergence => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Pinhole intrinsics of a `width x height` image.
#[pyclass(name = "Intrinsics", module = "dynafuse_py", skip_from_py_object)]
#[derive(Clone)]
struct PyIntrinsics {
    inner: geometry::Intrinsics,
}

#[pymethods]
impl PyIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, ox: f64, oy: f64, width: usize, height: usize) -> PyResult<Self> {
        let inner = geometry::Intrinsics::new(fx, fy, ox, oy, width, height).map_err(to_py)?;
        Ok(PyIntrinsics { inner })
    }

    /// Camera-frame point to pixel `(u, v)`.
    fn project(&self, x: f64, y: f64, z: f64) -> PyResult<(f64, f64)> {
        let p = geometry::project(&Point3::new(x, y, z), &self.inner).map_err(to_py)?;
        Ok((p.x, p.y))
    }

    /// Pixel plus metric depth to a camera-frame point.
    fn backproject(&self, u: f64, v: f64, depth: f64) -> PyResult<(f64, f64, f64)> {
        let p = geometry::backproject(Pixel::new(u, v), depth, &self.inner).map_err(to_py)?;
        Ok((p.x, p.y, p.z))
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    fn __repr__(&self) -> String {
        let k = &self.inner;
        format!(
            "Intrinsics(fx={}, fy={}, ox={}, oy={}, width={}, height={})",
            k.fx, k.fy, k.ox, k.oy, k.width, k.height
        )
    }
}

/// Rigid transform in SE(3).
#[pyclass(name = "Pose", module = "dynafuse_py", skip_from_py_object)]
#[derive(Clone)]
struct PyPose {
    inner: geometry::Pose,
}

#[pymethods]
impl PyPose {
    /// From a row-major 3x3 rotation and a translation.
    #[new]
    #[pyo3(signature = (rotation=None, translation=None))]
    fn new(rotation: Option<[[f64; 3]; 3]>, translation: Option<[f64; 3]>) -> PyResult<Self> {
        let r = rotation.map_or(Matrix3::identity(), |r| Matrix3::from_fn(|i, j| r[i][j]));
        let t = translation.map_or(Vector3::zeros(), Vector3::from);
        let inner = geometry::Pose::new(r, t).map_err(to_py)?;
        Ok(PyPose { inner })
    }

    #[staticmethod]
    fn identity() -> Self {
        PyPose {
            inner: geometry::Pose::identity(),
        }
    }

    /// Exponential of a twist `(vx, vy, vz, wx, wy, wz)`.
    #[staticmethod]
    fn exp(xi: [f64; 6]) -> Self {
        let t = Twist::new(Vector3::new(xi[0], xi[1], xi[2]), Vector3::new(xi[3], xi[4], xi[5]));
        PyPose {
            inner: geometry::Pose::exp(&t),
        }
    }

    /// From `(tx, ty, tz)` and a quaternion `(qx, qy, qz, qw)`.
    #[staticmethod]
    fn from_quaternion(translation: [f64; 3], q: [f64; 4]) -> Self {
        let q = geometry::UnitQuaternion::new(q[0], q[1], q[2], q[3]);
        PyPose {
            inner: geometry::quat_to_pose(&q, Vector3::from(translation)),
        }
    }

    fn log(&self) -> PyResult<[f64; 6]> {
        let xi = self.inner.log().map_err(to_py)?;
        Ok([xi.v.x, xi.v.y, xi.v.z, xi.w.x, xi.w.y, xi.w.z])
    }

    /// `((tx, ty, tz), (qx, qy, qz, qw))` with `qw >= 0`.
    fn to_quaternion(&self) -> ([f64; 3], [f64; 4]) {
        let (q, t) = geometry::pose_to_quat(&self.inner);
        ([t.x, t.y, t.z], [q.qx, q.qy, q.qz, q.qw])
    }

    /// Row-major 4x4 homogeneous matrix.
    fn matrix(&self) -> [[f64; 4]; 4] {
        let m = self.inner.to_matrix();
        std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
    }

    fn compose(&self, other: PyRef<'_, PyPose>) -> Self {
        PyPose {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> Self {
        PyPose {
            inner: self.inner.inverse(),
        }
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.inner.transform_point(&Point3::from(p));
        [q.x, q.y, q.z]
    }

    fn rotation_angle(&self) -> f64 {
        self.inner.rotation_angle()
    }

    fn __repr__(&self) -> String {
        format!("Pose({})", TrajectoryEntry::from_pose(0.0, &self.inner).to_line())
    }
}

/// Segments `rgb_path` inside the `(x, y, w, h)` boxes and writes the mask
/// PNG if `out` is given. Returns `(mask_pixel_count, energy_traces)`.
#[pyfunction]
#[pyo3(signature = (rgb_path, bboxes, out=None, components=5, gamma=50.0, max_iters=10, tol=1e-4))]
fn segment(
    rgb_path: PathBuf,
    bboxes: Vec<(f64, f64, f64, f64)>,
    out: Option<PathBuf>,
    components: usize,
    gamma: f64,
    max_iters: usize,
    tol: f64,
) -> PyResult<(usize, Vec<Vec<f64>>)> {
    let img = RgbImage::load(&rgb_path).map_err(to_py)?;
    let boxes: Vec<BBox> = bboxes.into_iter().map(|(x, y, w, h)| BBox::new(x, y, w, h)).collect();
    let params = GrabcutParams {
        components,
        gamma,
        max_iters,
        tol,
    };
    let (mask, outcomes) = segment_boxes(&img, &boxes, &[], &params).map_err(to_py)?;
    if let Some(p) = out {
        mask.save_png(&p).map_err(to_py)?;
    }
    Ok((mask.count(), outcomes.into_iter().map(|o| o.energy_trace).collect()))
}

fn load_frame(rgb: &Path, depth: &Path, scale: f64) -> PyResult<FramePair> {
    let rgb = RgbImage::load(rgb).map_err(to_py)?;
    let depth = DepthImage::load(depth, scale).map_err(to_py)?;
    FramePair::new(0.0, rgb, depth).map_err(to_py)
}

fn load_mask(p: Option<PathBuf>) -> PyResult<Option<AlphaMask>> {
    p.map(|p| AlphaMask::load_png(&p).map_err(to_py)).transpose()
}

/// Estimates the transform taking frame-1 points into frame 2.
///
/// Returns a dict with `pose`, `cost`, `valid_fraction` and `iterations`
/// (per pyramid level, coarsest first).
#[pyfunction]
#[pyo3(signature = (rgb1, depth1, rgb2, depth2, intrinsics, depth_scale=5000.0, mask1=None, mask2=None, pyramid_levels=4))]
#[allow(clippy::too_many_arguments)]
fn align<'py>(
    py: Python<'py>,
    rgb1: PathBuf,
    depth1: PathBuf,
    rgb2: PathBuf,
    depth2: PathBuf,
    intrinsics: PyRef<'_, PyIntrinsics>,
    depth_scale: f64,
    mask1: Option<PathBuf>,
    mask2: Option<PathBuf>,
    pyramid_levels: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let f1 = load_frame(&rgb1, &depth1, depth_scale)?;
    let f2 = load_frame(&rgb2, &depth2, depth_scale)?;
    let (m1, m2) = (load_mask(mask1)?, load_mask(mask2)?);
    let params = AlignmentParams {
        pyramid_levels,
        ..Default::default()
    };
    let k = intrinsics.inner;
    let r = py
        .detach(|| align_frames(&f1, &f2, m1.as_ref(), m2.as_ref(), &k, &geometry::Pose::identity(), &params))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("pose", PyPose { inner: r.pose })?;
    d.set_item("cost", r.final_cost)?;
    d.set_item("valid_fraction", r.valid_pixel_fraction)?;
    d.set_item("iterations", r.iterations_per_level)?;
    Ok(d)
}

/// Detection stream as `[(timestamp, [(label, confidence, (x, y, w, h)), ...]), ...]`,
/// with boxes clamped to `width x height`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn read_detections(
    path: PathBuf,
    width: usize,
    height: usize,
) -> PyResult<Vec<(f64, Vec<(String, f64, (f64, f64, f64, f64))>)>> {
    let sets = read_detection_file(&path, width, height).map_err(to_py)?;
    Ok(sets
        .into_iter()
        .map(|s| {
            let dets = s
                .detections
                .into_iter()
                .map(|d| (d.label, d.confidence, (d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h)))
                .collect();
            (s.timestamp, dets)
        })
        .collect())
}

/// Runs the whole pipeline from a config file; `overrides` maps config keys
/// to string values. Returns the run summary as a dict.
#[pyfunction]
#[pyo3(signature = (config, overrides=None))]
fn run_pipeline<'py>(
    py: Python<'py>,
    config: PathBuf,
    overrides: Option<Vec<(String, String)>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut raw = RawConfig::load(&config).map_err(to_py)?;
    for (k, v) in overrides.unwrap_or_default() {
        raw.set(&k, &v).map_err(to_py)?;
    }
    let cfg = raw.resolve().map_err(to_py)?;
    let s = py.detach(|| dynafuse::pipeline::run(&cfg)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("frames", s.frames)?;
    d.set_item("frames_with_dynamic", s.frames_with_dynamic)?;
    d.set_item("segmentation_failures", s.segmentation_failures)?;
    d.set_item("alignments", s.alignments)?;
    d.set_item("alignment_failures", s.alignment_failures)?;
    d.set_item("majority_failed", s.majority_failed())?;
    d.set_item("mean_valid_fraction", s.mean_valid_fraction)?;
    d.set_item("points", s.points)?;
    d.set_item("seconds", s.seconds)?;
    d.set_item("out_ply", s.out_ply)?;
    d.set_item("out_traj", s.out_traj)?;
    Ok(d)
}

/// Writes a synthetic sequence with a moving person-labeled box to `out`
/// and returns the path of its config file.
#[pyfunction]
#[pyo3(signature = (out, frames=10))]
fn synthesize(out: PathBuf, frames: usize) -> PyResult<PathBuf> {
    if frames == 0 {
        return Err(PyValueError::new_err("frames must be at least 1"));
    }
    let paths = write_dataset(&out, &moving_person_sequence(frames), 6.0).map_err(to_py)?;
    Ok(paths.config)
}

#[pymodule]
fn dynafuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyPose>()?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(read_detections, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    Ok(())
}
