//! End-to-end run: detections to masks, masked alignment, chained poses,
//! fusion and export.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::detection::{find_for_timestamp, read_detections, select_dynamic, BBox, DetectionSet};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::imaging::{associate, read_index, Association, FramePair};
use crate::odometry::{estimate_pose, PreparedFrame};
use crate::reconstruction::{
    fuse_frame, parse_trajectory, trajectory_string, write_ply, PointCloud, TrajectoryEntry,
    VoxelGrid,
};
use crate::segmentation::{load_strokes, segment_boxes, AlphaMask, Stroke};

/// Frames fused per parallel batch.
const FUSION_BATCH: usize = 8;

/// Inputs that were checked before any processing.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub associations: Vec<Association>,
    pub detections: Vec<DetectionSet>,
    pub intrinsics: Intrinsics,
}

/// Reads and validates every input the run depends on.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let rgb = read_index(&cfg.rgb_index)?;
    let depth = read_index(&cfg.depth_index)?;
    let associations = associate(&rgb, &depth, cfg.max_dt)?;
    for a in &associations {
        for p in [&a.rgb_path, &a.depth_path] {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "frame file not found"),
                ));
            }
        }
    }
    let first = FramePair::load(&associations[0], cfg.depth_scale)?;
    let c = cfg.camera;
    let intrinsics = Intrinsics::new(c.fx, c.fy, c.ox, c.oy, first.width(), first.height())?;
    let detections = match &cfg.detections {
        Some(p) => read_detections(p, first.width(), first.height())?,
        None => Vec::new(),
    };
    Ok(Dataset {
        associations,
        detections,
        intrinsics,
    })
}

pub fn mask_file_name(timestamp: f64) -> String {
    format!("{timestamp:.6}.mask.png")
}

pub fn strokes_file_name(timestamp: f64) -> String {
    format!("{timestamp:.6}.strokes.png")
}

/// Union of box rectangles, the fallback mask when segmentation fails.
fn box_mask(boxes: &[BBox], width: usize, height: usize) -> AlphaMask {
    let mut m = AlphaMask::zeros(width, height);
    for b in boxes {
        if let Some(r) = b.to_pixel_rect(width, height) {
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    m.data[y * width + x] = 1;
                }
            }
        }
    }
    m
}

fn frame_strokes(cfg: &PipelineConfig, frame: &FramePair) -> Result<Vec<Stroke>> {
    match &cfg.strokes_dir {
        Some(dir) => {
            let p = dir.join(strokes_file_name(frame.timestamp));
            if p.is_file() {
                load_strokes(&p, frame.width(), frame.height())
            } else {
                Ok(Vec::new())
            }
        }
        None => Ok(Vec::new()),
    }
}

/// Dynamic mask of one frame (undilated) and whether segmentation succeeded.
struct FrameMask {
    mask: Option<AlphaMask>,
    had_dynamic: bool,
    segmentation_ok: bool,
}

fn segment_frame(cfg: &PipelineConfig, data: &Dataset, frame: &FramePair) -> FrameMask {
    let boxes = find_for_timestamp(&data.detections, frame.timestamp, cfg.max_dt)
        .map(|ds| select_dynamic(ds, &cfg.policy))
        .unwrap_or_default();
    if boxes.is_empty() {
        return FrameMask {
            mask: None,
            had_dynamic: false,
            segmentation_ok: true,
        };
    }
    let result = frame_strokes(cfg, frame)
        .and_then(|strokes| segment_boxes(&frame.rgb, &boxes, &strokes, &cfg.grabcut));
    match result {
        Ok((mask, _)) => FrameMask {
            mask: Some(mask),
            had_dynamic: true,
            segmentation_ok: true,
        },
        Err(e) => {
            warn!("frame {:.6}: segmentation failed: {e}", frame.timestamp);
            FrameMask {
                mask: Some(box_mask(&boxes, frame.width(), frame.height())),
                had_dynamic: true,
                segmentation_ok: false,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub frames: usize,
    pub frames_with_dynamic: usize,
    /// Timestamps of frames with no dynamic detection; a moving object in
    /// one of these leaks into the cloud.
    pub frames_without_dynamic: Vec<f64>,
    pub segmentation_failures: usize,
    pub alignments: usize,
    pub alignment_failures: usize,
    pub mean_valid_fraction: f64,
    pub mean_gn_iterations: f64,
    pub points: usize,
    pub seconds: f64,
    pub out_ply: PathBuf,
    pub out_traj: PathBuf,
}

impl RunSummary {
    /// More than half of the alignments failed.
    pub fn majority_failed(&self) -> bool {
        self.alignments > 0 && 2 * self.alignment_failures > self.alignments
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames processed:        {}", self.frames)?;
        writeln!(f, "frames with detections:  {}", self.frames_with_dynamic)?;
        writeln!(f, "frames without dynamic:  {}", self.frames_without_dynamic.len())?;
        writeln!(f, "segmentation failures:   {}", self.segmentation_failures)?;
        writeln!(f, "alignments:              {} ({} failed)", self.alignments, self.alignment_failures)?;
        writeln!(f, "mean valid fraction:     {:.4}", self.mean_valid_fraction)?;
        writeln!(f, "mean GN iterations:      {:.2}", self.mean_gn_iterations)?;
        writeln!(f, "points:                  {}", self.points)?;
        let fps = if self.seconds > 0.0 {
            self.frames as f64 / self.seconds
        } else {
            0.0
        };
        writeln!(f, "elapsed:                 {:.2} s ({fps:.2} frames/s)", self.seconds)?;
        writeln!(f, "point cloud:             {}", self.out_ply.display())?;
        write!(f, "trajectory:              {}", self.out_traj.display())
    }
}

/// Fuses frames in order under the given world-from-camera poses. Frames with
/// `None` pose are skipped; masks are dilated before use.
pub fn fuse_sequence(
    assoc: &[Association],
    poses: &[Option<Pose>],
    masks: &[Option<AlphaMask>],
    k: &Intrinsics,
    cfg: &PipelineConfig,
) -> Result<PointCloud> {
    let mut grid = if cfg.voxel_size > 0.0 {
        Some(VoxelGrid::new(cfg.voxel_size)?)
    } else {
        None
    };
    let mut raw = PointCloud::new();
    let indices: Vec<usize> = (0..assoc.len()).filter(|&i| poses[i].is_some()).collect();
    for batch in indices.chunks(FUSION_BATCH) {
        let clouds: Vec<PointCloud> = batch
            .par_iter()
            .map(|&i| {
                let frame = FramePair::load(&assoc[i], cfg.depth_scale)?;
                let mask = masks[i]
                    .as_ref()
                    .map(|m| m.dilate(cfg.alignment.mask_dilation_px));
                let mut c = PointCloud::new();
                fuse_frame(&mut c, &frame, poses[i].as_ref().unwrap(), mask.as_ref(), k, cfg.fusion_stride);
                Ok(c)
            })
            .collect::<Result<_>>()?;
        for c in &clouds {
            match grid.as_mut() {
                Some(g) => g.extend(c),
                None => raw.points.extend_from_slice(&c.points),
            }
        }
    }
    Ok(match grid {
        Some(g) => g.to_cloud(),
        None => raw,
    })
}

/// Runs every stage and writes the cloud and trajectory.
///
/// Per-frame segmentation or alignment failures are logged; the affected
/// frame is left out of the cloud and chaining continues with an identity
/// step. The caller decides what a majority of failed alignments means.
pub fn run(cfg: &PipelineConfig) -> Result<RunSummary> {
    let start = Instant::now();
    let data = load_dataset(cfg)?;
    let k = data.intrinsics;
    if let Some(dir) = &cfg.debug_masks {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n = data.associations.len();
    info!("{n} associated frames");

    let mut masks: Vec<Option<AlphaMask>> = Vec::with_capacity(n);
    let mut fusable = vec![true; n];
    let mut cameras: Vec<Pose> = Vec::with_capacity(n);
    let mut summary = RunSummary {
        frames: n,
        frames_with_dynamic: 0,
        frames_without_dynamic: Vec::new(),
        segmentation_failures: 0,
        alignments: 0,
        alignment_failures: 0,
        mean_valid_fraction: 0.0,
        mean_gn_iterations: 0.0,
        points: 0,
        seconds: 0.0,
        out_ply: cfg.out_ply.clone(),
        out_traj: cfg.out_traj.clone(),
    };
    let mut fraction_sum = 0.0;
    let mut iteration_sum = 0usize;
    let mut previous: Option<PreparedFrame> = None;
    let mut last_step = Pose::identity();

    for (i, a) in data.associations.iter().enumerate() {
        let frame = FramePair::load(a, cfg.depth_scale)?;
        if (frame.width(), frame.height()) != (k.width, k.height) {
            return Err(Error::DimensionMismatch(format!(
                "frame {} is {}x{}, expected {}x{}",
                a.rgb_path.display(),
                frame.width(),
                frame.height(),
                k.width,
                k.height
            )));
        }
        let fm = segment_frame(cfg, &data, &frame);
        if fm.had_dynamic {
            summary.frames_with_dynamic += 1;
        } else {
            summary.frames_without_dynamic.push(frame.timestamp);
        }
        if !fm.segmentation_ok {
            summary.segmentation_failures += 1;
            fusable[i] = false;
        }
        if let Some(dir) = &cfg.debug_masks {
            let m = fm
                .mask
                .clone()
                .unwrap_or_else(|| AlphaMask::zeros(frame.width(), frame.height()));
            m.save_png(&dir.join(mask_file_name(frame.timestamp)))?;
        }

        let prepared = PreparedFrame::new(
            &frame,
            fm.mask.as_ref(),
            cfg.alignment.pyramid_levels,
            cfg.alignment.mask_dilation_px,
        )?;
        let camera = match &previous {
            None => Pose::identity(),
            Some(prev) => {
                summary.alignments += 1;
                let init = if cfg.init_from_previous {
                    last_step
                } else {
                    Pose::identity()
                };
                let step = match estimate_pose(prev, &prepared, &k, &init, &cfg.alignment) {
                    Ok(r) => {
                        fraction_sum += r.valid_pixel_fraction;
                        iteration_sum += r.total_iterations();
                        r.pose
                    }
                    Err(e) => {
                        warn!("frame {:.6}: alignment failed: {e}; using identity", frame.timestamp);
                        summary.alignment_failures += 1;
                        fusable[i] = false;
                        Pose::identity()
                    }
                };
                last_step = step;
                // P_cur = step * P_prev, so C_cur = C_prev * step^-1
                cameras[i - 1].compose(&step.inverse())
            }
        };
        cameras.push(camera);
        masks.push(fm.mask);
        previous = Some(prepared);
    }

    let entries: Vec<TrajectoryEntry> = data
        .associations
        .iter()
        .zip(&cameras)
        .map(|(a, c)| TrajectoryEntry::from_pose(a.timestamp, c))
        .collect();
    let traj_text = trajectory_string(&entries);
    // fuse with the poses exactly as written, so the file alone reproduces the cloud
    let written = parse_trajectory(&traj_text, "trajectory")?;
    let poses: Vec<Option<Pose>> = written
        .iter()
        .zip(&fusable)
        .map(|(e, ok)| ok.then(|| e.to_pose()))
        .collect();
    let cloud = fuse_sequence(&data.associations, &poses, &masks, &k, cfg)?;

    write_ply(&cloud, &cfg.out_ply)?;
    fs::write(&cfg.out_traj, traj_text).map_err(|e| Error::io(&cfg.out_traj, e))?;

    let ok = summary.alignments - summary.alignment_failures;
    if ok > 0 {
        summary.mean_valid_fraction = fraction_sum / ok as f64;
        summary.mean_gn_iterations = iteration_sum as f64 / ok as f64;
    }
    summary.points = cloud.len();
    summary.seconds = start.elapsed().as_secs_f64();
    Ok(summary)
}

/// Matches trajectory entries to frames by timestamp and fuses the frames,
/// using masks from `mask_dir` (`<timestamp>.mask.png`) when present.
pub fn reconstruct(
    cfg: &PipelineConfig,
    trajectory: &[TrajectoryEntry],
    trajectory_path: &Path,
    mask_dir: Option<&Path>,
) -> Result<PointCloud> {
    if trajectory.is_empty() {
        return Err(Error::Parse {
            path: trajectory_path.display().to_string(),
            line: 0,
            msg: "trajectory is empty".into(),
        });
    }
    let data = load_dataset(cfg)?;
    let mut poses = vec![None; data.associations.len()];
    let mut masks = vec![None; data.associations.len()];
    for (i, a) in data.associations.iter().enumerate() {
        let best = trajectory
            .iter()
            .map(|e| ((e.timestamp - a.timestamp).abs(), e))
            .filter(|(dt, _)| *dt <= cfg.max_dt)
            .min_by(|x, y| x.0.total_cmp(&y.0));
        let Some((_, entry)) = best else {
            continue;
        };
        poses[i] = Some(entry.to_pose());
        if let Some(dir) = mask_dir {
            let p = dir.join(mask_file_name(a.timestamp));
            if p.is_file() {
                let m = AlphaMask::load_png(&p)?;
                if (m.width, m.height) != (data.intrinsics.width, data.intrinsics.height) {
                    return Err(Error::DimensionMismatch(format!(
                        "mask {} is {}x{}",
                        p.display(),
                        m.width,
                        m.height
                    )));
                }
                masks[i] = (m.count() > 0).then_some(m);
            }
        }
    }
    if poses.iter().all(Option::is_none) {
        return Err(Error::Parse {
            path: trajectory_path.display().to_string(),
            line: 0,
            msg: "no trajectory entry matches any frame".into(),
        });
    }
    fuse_sequence(&data.associations, &poses, &masks, &data.intrinsics, cfg)
}
