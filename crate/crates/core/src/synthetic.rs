//! Ray-cast RGB-D scenes with known camera motion, used as ground truth.
//!
//! A scene is a textured tilted plane, an optional textured sphere and an
//! optional box moving at constant velocity. Textures are smooth functions of
//! position (world position for the static parts, object-local position for
//! the moving box), so brightness is constant under camera motion.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};

use crate::detection::{write_detections, BBox, Detection, DetectionSet};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::imaging::{DepthImage, FramePair, RgbImage, DEFAULT_DEPTH_SCALE};
use crate::reconstruction::{write_trajectory, TrajectoryEntry};
use crate::segmentation::AlphaMask;

/// `normal . X = offset`, with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Point3<f64>,
    pub radius: f64,
}

/// Axis-aligned box translating at constant velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingBox {
    pub center: Point3<f64>,
    pub half_extents: Vector3<f64>,
    /// Meters per second.
    pub velocity: Vector3<f64>,
    pub label: String,
}

impl MovingBox {
    pub fn center_at(&self, time: f64) -> Point3<f64> {
        self.center + self.velocity * time
    }

    /// World-space bounds of the box over all `times`.
    pub fn swept_bounds(&self, times: &[f64]) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::from([f64::INFINITY; 3]);
        let mut hi = Point3::from([f64::NEG_INFINITY; 3]);
        for &t in times {
            let c = self.center_at(t);
            for i in 0..3 {
                lo[i] = lo[i].min(c[i] - self.half_extents[i]);
                hi[i] = hi[i].max(c[i] + self.half_extents[i]);
            }
        }
        (lo, hi)
    }

    fn intersect(&self, o: &Point3<f64>, d: &Vector3<f64>, time: f64) -> Option<f64> {
        let c = self.center_at(time);
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..3 {
            let lo = c[i] - self.half_extents[i];
            let hi = c[i] + self.half_extents[i];
            if d[i].abs() < 1e-15 {
                if o[i] < lo || o[i] > hi {
                    return None;
                }
                continue;
            }
            let (a, b) = ((lo - o[i]) / d[i], (hi - o[i]) / d[i]);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub plane: Plane,
    pub sphere: Option<Sphere>,
    pub object: Option<MovingBox>,
}

#[derive(Clone, Copy, PartialEq)]
enum Surface {
    Static,
    Object,
}

impl Scene {
    /// Tilted plane about 2 m away only.
    pub fn plane_only() -> Self {
        Scene {
            plane: Plane {
                normal: Vector3::new(-0.2, -0.1, 1.0).normalize(),
                offset: 2.0 / Vector3::new(-0.2, -0.1, 1.0).norm(),
            },
            sphere: None,
            object: None,
        }
    }

    /// Tilted plane with a sphere of radius 0.3 m in front of it.
    pub fn plane_and_sphere() -> Self {
        Scene {
            sphere: Some(Sphere {
                center: Point3::new(0.15, 0.05, 1.6),
                radius: 0.3,
            }),
            ..Scene::plane_only()
        }
    }

    pub fn with_object(mut self, object: MovingBox) -> Self {
        self.object = Some(object);
        self
    }

    fn cast(&self, o: &Point3<f64>, d: &Vector3<f64>, time: f64) -> Option<(f64, Surface)> {
        let mut best: Option<(f64, Surface)> = None;
        let mut consider = |t: Option<f64>, s: Surface| {
            if let Some(t) = t {
                if t > 0.0 && best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, s));
                }
            }
        };
        let denom = self.plane.normal.dot(d);
        if denom.abs() > 1e-12 {
            consider(
                Some((self.plane.offset - self.plane.normal.dot(&o.coords)) / denom),
                Surface::Static,
            );
        }
        if let Some(s) = &self.sphere {
            let oc = o - s.center;
            let b = oc.dot(d);
            let a = d.norm_squared();
            let c = oc.norm_squared() - s.radius * s.radius;
            let disc = b * b - a * c;
            if disc >= 0.0 {
                consider(Some((-b - disc.sqrt()) / a), Surface::Static);
            }
        }
        if let Some(obj) = &self.object {
            consider(obj.intersect(o, d, time), Surface::Object);
        }
        best
    }

    fn shade(&self, p: &Point3<f64>, surface: Surface, time: f64) -> [f64; 3] {
        match surface {
            Surface::Static => static_texture(p),
            Surface::Object => {
                let u = p - self.object.as_ref().expect("object hit").center_at(time);
                object_texture(&u)
            }
        }
    }
}

fn static_texture(p: &Point3<f64>) -> [f64; 3] {
    let (x, y, z) = (p.x, p.y, p.z);
    [
        0.35 + 0.15 * (7.0 * x + 2.0 * y).sin() + 0.1 * (23.0 * y - 11.0 * z).sin(),
        0.45 + 0.2 * (5.0 * y - 3.0 * x).cos() + 0.1 * (19.0 * x + 13.0 * z).sin(),
        0.4 + 0.15 * (9.0 * z + 4.0 * x).sin() * (6.0 * y).cos() + 0.1 * (17.0 * x - 21.0 * y).cos(),
    ]
}

fn object_texture(u: &Vector3<f64>) -> [f64; 3] {
    [
        0.88 + 0.07 * (30.0 * u.x).sin(),
        0.1 + 0.07 * (25.0 * u.y + 20.0 * u.x).sin(),
        0.1 + 0.07 * (28.0 * u.y - 9.0 * u.z).cos(),
    ]
}

/// 320x240 camera with a 60-ish degree horizontal field of view.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics::new(260.0, 260.0, 159.5, 119.5, 320, 240).expect("valid constants")
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub frame: FramePair,
    /// Ground-truth pixels showing the moving object.
    pub object_mask: AlphaMask,
}

/// Renders the scene from a world-from-camera pose. Depth is exact (not
/// quantized); pixels hitting nothing get depth 0.
pub fn render(scene: &Scene, k: &Intrinsics, camera: &Pose, timestamp: f64, time: f64) -> Rendered {
    let (w, h) = (k.width, k.height);
    let mut rgb = RgbImage::filled(w, h, [0, 0, 0]);
    let mut depth = vec![0.0; w * h];
    let mut mask = AlphaMask::zeros(w, h);
    let origin = Point3::from(camera.translation);
    for y in 0..h {
        for x in 0..w {
            let dc = Vector3::new((x as f64 - k.ox) / k.fx, (y as f64 - k.oy) / k.fy, 1.0);
            let d = camera.rotation * dc;
            // camera-frame z of the hit equals the ray parameter since dc.z = 1
            if let Some((t, surface)) = scene.cast(&origin, &d, time) {
                let p = origin + d * t;
                let c = scene.shade(&p, surface, time);
                rgb.set(x, y, c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
                depth[y * w + x] = t;
                if surface == Surface::Object {
                    mask.data[y * w + x] = 1;
                }
            }
        }
    }
    Rendered {
        frame: FramePair::new(
            timestamp,
            rgb,
            DepthImage::new(w, h, depth).expect("depths are finite and positive"),
        )
        .expect("matching sizes"),
        object_mask: mask,
    }
}

/// Tight pixel box around a mask, grown by `pad` pixels and clamped.
pub fn mask_bbox(mask: &AlphaMask, pad: f64) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.is_set(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    BBox::new(
        x0 as f64 - pad,
        y0 as f64 - pad,
        (x1 - x0) as f64 + 2.0 * pad,
        (y1 - y0) as f64 + 2.0 * pad,
    )
    .clamp(mask.width, mask.height)
}

/// Camera path and timing of a rendered sequence.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub scene: Scene,
    pub intrinsics: Intrinsics,
    /// World-from-camera, world = first camera.
    pub cameras: Vec<Pose>,
    /// Seconds since the first frame.
    pub times: Vec<f64>,
    /// Added to `times` to form file timestamps.
    pub start_timestamp: f64,
}

impl Sequence {
    pub fn timestamp(&self, i: usize) -> f64 {
        // round to the 6 decimals the index files carry
        ((self.start_timestamp + self.times[i]) * 1e6).round() / 1e6
    }

    pub fn render(&self, i: usize) -> Rendered {
        render(&self.scene, &self.intrinsics, &self.cameras[i], self.timestamp(i), self.times[i])
    }
}

/// A person-labeled box moving right to left across the view.
pub fn moving_person_sequence(frames: usize) -> Sequence {
    let scene = Scene::plane_and_sphere().with_object(MovingBox {
        center: Point3::new(0.25, -0.05, 1.0),
        half_extents: Vector3::new(0.15, 0.25, 0.1),
        velocity: Vector3::new(-0.6, 0.0, 0.0),
        label: "person".into(),
    });
    let dt = 1.0 / 30.0;
    let cameras = (0..frames)
        .map(|i| {
            let s = i as f64;
            Pose::exp(&crate::geometry::Twist::new(
                Vector3::new(0.004 * s, -0.002 * s, 0.003 * s),
                Vector3::new(0.002 * s, 0.004 * s, -0.001 * s),
            ))
        })
        .collect();
    Sequence {
        scene,
        intrinsics: default_intrinsics(),
        cameras,
        times: (0..frames).map(|i| i as f64 * dt).collect(),
        start_timestamp: 1000.0,
    }
}

/// Files written by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub root: PathBuf,
    pub rgb_index: PathBuf,
    pub depth_index: PathBuf,
    pub detections: PathBuf,
    pub groundtruth: PathBuf,
    pub config: PathBuf,
}

/// Writes PNG frames, index files, a detection stream listing the moving
/// object (padded by `bbox_pad` pixels) plus one static distractor, the
/// ground-truth trajectory and a matching config file.
pub fn write_dataset(dir: &Path, seq: &Sequence, bbox_pad: f64) -> Result<DatasetPaths> {
    for sub in ["rgb", "depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rgb_index = String::from("# timestamp filename\n");
    let mut depth_index = String::from("# timestamp filename\n");
    let mut sets = Vec::with_capacity(seq.cameras.len());
    let mut gt = Vec::with_capacity(seq.cameras.len());
    for i in 0..seq.cameras.len() {
        let r = seq.render(i);
        let ts = seq.timestamp(i);
        let name = format!("{ts:.6}.png");
        r.frame.rgb.save(&dir.join("rgb").join(&name))?;
        r.frame.depth.save(&dir.join("depth").join(&name), DEFAULT_DEPTH_SCALE)?;
        let _ = writeln!(rgb_index, "{ts:.6} rgb/{name}");
        let _ = writeln!(depth_index, "{ts:.6} depth/{name}");

        let mut detections = vec![Detection {
            label: "cup".into(),
            confidence: 0.8,
            bbox: BBox::new(20.0, 170.0, 40.0, 40.0),
        }];
        if let (Some(obj), Some(bbox)) = (&seq.scene.object, mask_bbox(&r.object_mask, bbox_pad)) {
            detections.push(Detection {
                label: obj.label.clone(),
                confidence: 0.9,
                bbox,
            });
        }
        sets.push(DetectionSet {
            timestamp: ts,
            detections,
        });
        gt.push(TrajectoryEntry::from_pose(ts, &seq.cameras[i]));
    }

    let paths = DatasetPaths {
        root: dir.to_path_buf(),
        rgb_index: dir.join("rgb.txt"),
        depth_index: dir.join("depth.txt"),
        detections: dir.join("detections.jsonl"),
        groundtruth: dir.join("groundtruth.txt"),
        config: dir.join("dynafuse.conf"),
    };
    let write = |p: &Path, s: &str| fs::write(p, s).map_err(|e| Error::io(p, e));
    write(&paths.rgb_index, &rgb_index)?;
    write(&paths.depth_index, &depth_index)?;
    write(&paths.detections, &write_detections(&sets))?;
    write_trajectory(&gt, &paths.groundtruth)?;
    let k = &seq.intrinsics;
    let config = format!(
        "rgb_index = rgb.txt\ndepth_index = depth.txt\ndetections = detections.jsonl\n\
         fx = {}\nfy = {}\nox = {}\noy = {}\n",
        k.fx, k.fy, k.ox, k.oy
    );
    write(&paths.config, &config)?;
    Ok(paths)
}
