//! World-frame colored point cloud from masked frames, plus PLY and
//! trajectory file formats.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{pose_to_quat, quat_to_pose, Intrinsics, Pose, UnitQuaternion};
use crate::imaging::FramePair;
use crate::segmentation::AlphaMask;

pub const DEFAULT_FUSION_STRIDE: usize = 2;
pub const DEFAULT_VOXEL_SIZE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: Point3<f64>,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<ColoredPoint>,
}

impl PointCloud {
    pub fn new() -> Self {
        PointCloud::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Back-projects every unmasked pixel with valid depth on the stride grid
/// and appends it in world coordinates, in row-major order.
pub fn fuse_frame(
    cloud: &mut PointCloud,
    frame: &FramePair,
    pose: &Pose,
    mask: Option<&AlphaMask>,
    k: &Intrinsics,
    stride: usize,
) {
    let stride = stride.max(1);
    let (w, h) = (frame.width(), frame.height());
    let rows: Vec<usize> = (0..h).step_by(stride).collect();
    let chunks: Vec<Vec<ColoredPoint>> = rows
        .par_iter()
        .map(|&y| {
            let mut out = Vec::new();
            for x in (0..w).step_by(stride) {
                if mask.is_some_and(|m| m.is_set(x, y)) {
                    continue;
                }
                let z = frame.depth.get(x, y);
                if z <= 0.0 {
                    continue;
                }
                let p = Point3::new((x as f64 - k.ox) / k.fx * z, (y as f64 - k.oy) / k.fy * z, z);
                out.push(ColoredPoint {
                    position: pose.transform_point(&p),
                    color: frame.rgb.get(x, y),
                });
            }
            out
        })
        .collect();
    for c in chunks {
        cloud.points.extend(c);
    }
}

/// Running voxel-grid reduction; feeding points one by one gives the same
/// result as [`voxel_downsample`] on their concatenation.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    voxel: f64,
    slots: HashMap<[i64; 3], usize>,
    acc: Vec<(Vector3<f64>, [f64; 3], usize)>,
}

impl VoxelGrid {
    pub fn new(voxel: f64) -> Result<Self> {
        if !(voxel > 0.0 && voxel.is_finite()) {
            return Err(Error::Config(format!("voxel size must be positive, got {voxel}")));
        }
        Ok(VoxelGrid {
            voxel,
            slots: HashMap::new(),
            acc: Vec::new(),
        })
    }

    pub fn insert(&mut self, p: &ColoredPoint) {
        let key = [
            (p.position.x / self.voxel).floor() as i64,
            (p.position.y / self.voxel).floor() as i64,
            (p.position.z / self.voxel).floor() as i64,
        ];
        let acc = &mut self.acc;
        let slot = *self.slots.entry(key).or_insert_with(|| {
            acc.push((Vector3::zeros(), [0.0; 3], 0));
            acc.len() - 1
        });
        let a = &mut acc[slot];
        a.0 += p.position.coords;
        for c in 0..3 {
            a.1[c] += p.color[c] as f64;
        }
        a.2 += 1;
    }

    pub fn extend(&mut self, cloud: &PointCloud) {
        for p in &cloud.points {
            self.insert(p);
        }
    }

    /// Centroids with mean colors, in order of each voxel's first point.
    pub fn to_cloud(&self) -> PointCloud {
        let points = self
            .acc
            .iter()
            .map(|(sum, color, n)| {
                let n = *n as f64;
                ColoredPoint {
                    position: Point3::from(sum / n),
                    color: color.map(|c| (c / n).round() as u8),
                }
            })
            .collect();
        PointCloud { points }
    }
}

/// One point per occupied voxel: the centroid of its members with their mean
/// color. Output order follows the first occurrence of each voxel.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    let mut grid = VoxelGrid::new(voxel)?;
    grid.extend(cloud);
    Ok(grid.to_cloud())
}

/// Shortest round-trip representation with negative zero printed as `0`.
fn fmt_num<T: std::fmt::Display + PartialEq + Default>(v: T) -> String {
    if v == T::default() {
        "0".to_string()
    } else {
        v.to_string()
    }
}

/// ASCII PLY with `float` coordinates and `uchar` colors.
pub fn ply_string(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(64 + cloud.len() * 40);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
    );
    for p in &cloud.points {
        let [r, g, b] = p.color;
        let _ = writeln!(
            s,
            "{} {} {} {r} {g} {b}",
            fmt_num(p.position.x as f32),
            fmt_num(p.position.y as f32),
            fmt_num(p.position.z as f32)
        );
    }
    s
}

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, ply_string(cloud)).map_err(|e| Error::io(path, e))
}

/// Camera pose at a timestamp, world-from-camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion,
}

impl TrajectoryEntry {
    pub fn from_pose(timestamp: f64, pose: &Pose) -> Self {
        let (rotation, translation) = pose_to_quat(pose);
        TrajectoryEntry {
            timestamp,
            translation,
            rotation,
        }
    }

    pub fn to_pose(&self) -> Pose {
        quat_to_pose(&self.rotation, self.translation)
    }

    /// `timestamp tx ty tz qx qy qz qw`.
    pub fn to_line(&self) -> String {
        let t = &self.translation;
        let q = &self.rotation;
        format!(
            "{:.6} {} {} {} {} {} {} {}",
            self.timestamp,
            fmt_num(t.x),
            fmt_num(t.y),
            fmt_num(t.z),
            fmt_num(q.qx),
            fmt_num(q.qy),
            fmt_num(q.qz),
            fmt_num(q.qw)
        )
    }
}

pub fn trajectory_string(entries: &[TrajectoryEntry]) -> String {
    entries.iter().map(|e| e.to_line() + "\n").collect()
}

pub fn write_trajectory(entries: &[TrajectoryEntry], path: &Path) -> Result<()> {
    fs::write(path, trajectory_string(entries)).map_err(|e| Error::io(path, e))
}

/// Parses trajectory lines; `#` comments and blank lines are skipped.
pub fn parse_trajectory(text: &str, source_name: &str) -> Result<Vec<TrajectoryEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(source_name, i + 1, e.to_string()))?;
        if v.len() != 8 {
            return Err(Error::parse(
                source_name,
                i + 1,
                format!("expected 8 fields, found {}", v.len()),
            ));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(source_name, i + 1, "non-finite value"));
        }
        let norm = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
        if norm < 1e-12 {
            return Err(Error::parse(source_name, i + 1, "zero quaternion"));
        }
        out.push(TrajectoryEntry {
            timestamp: v[0],
            translation: Vector3::new(v[1], v[2], v[3]),
            rotation: UnitQuaternion::new(v[4], v[5], v[6], v[7]),
        });
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text, &path.display().to_string())
}
