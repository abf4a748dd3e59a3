use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use dynafuse::config::{keys_help, RawConfig};
use dynafuse::detection::BBox;
use dynafuse::geometry::Intrinsics;
use dynafuse::imaging::{DepthImage, FramePair, RgbImage};
use dynafuse::odometry::align_frames;
use dynafuse::pipeline::{reconstruct, run};
use dynafuse::reconstruction::{read_trajectory, write_ply, TrajectoryEntry};
use dynafuse::segmentation::{load_strokes, segment_boxes, AlphaMask};
use dynafuse::synthetic::{moving_person_sequence, write_dataset};
use dynafuse::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dynafuse",
    version,
    about = "Static-scene RGB-D reconstruction with detection-guided masking of moving objects",
    after_long_help = keys_help() + "\nExit codes: 0 success, 1 config or input error, 2 more than half of the alignments failed."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable), e.g. `--set gamma=30`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RawConfig> {
        let mut raw = match &self.config {
            Some(p) => RawConfig::load(p)?,
            None => RawConfig::new(Path::new(".")),
        };
        for o in &self.overrides {
            raw.set_pair(o)?;
        }
        Ok(raw)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Segment, align, fuse and export a whole sequence
    #[command(after_long_help = keys_help())]
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Point cloud output (overrides `out_ply`)
        #[arg(long)]
        out_ply: Option<PathBuf>,
        /// Trajectory output (overrides `out_traj`)
        #[arg(long)]
        out_traj: Option<PathBuf>,
        /// Write `<timestamp>.mask.png` per frame here (overrides `debug_masks`)
        #[arg(long)]
        debug_masks: Option<PathBuf>,
    },
    /// Segment one frame from bounding boxes; prints the energy trace
    #[command(after_long_help = keys_help())]
    Segment {
        #[command(flatten)]
        config: ConfigArgs,
        /// RGB image (8-bit PNG)
        #[arg(long)]
        rgb: PathBuf,
        /// Box as `x,y,w,h` in pixels (repeatable)
        #[arg(long = "bbox", value_name = "X,Y,W,H", required = true)]
        bboxes: Vec<String>,
        /// Stroke image: 255 forces foreground, 0 forces background
        #[arg(long)]
        strokes: Option<PathBuf>,
        /// Output mask PNG (255 = dynamic)
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the frame-1-to-frame-2 transform; prints `timestamp tx ty tz qx qy qz qw`
    #[command(after_long_help = keys_help())]
    Align {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        rgb1: PathBuf,
        #[arg(long)]
        depth1: PathBuf,
        #[arg(long)]
        rgb2: PathBuf,
        #[arg(long)]
        depth2: PathBuf,
        /// Dynamic mask of frame 1
        #[arg(long)]
        mask1: Option<PathBuf>,
        /// Dynamic mask of frame 2
        #[arg(long)]
        mask2: Option<PathBuf>,
        /// Timestamp printed with the pose
        #[arg(long, default_value_t = 0.0)]
        timestamp: f64,
    },
    /// Fuse the configured frames under a trajectory file
    #[command(after_long_help = keys_help())]
    Reconstruct {
        #[command(flatten)]
        config: ConfigArgs,
        /// Trajectory, `timestamp tx ty tz qx qy qz qw` per line
        #[arg(long)]
        traj: PathBuf,
        /// Directory of `<timestamp>.mask.png` masks
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Point cloud output (overrides `out_ply`)
        #[arg(long)]
        out_ply: Option<PathBuf>,
    },
    /// Write a synthetic sequence with a moving person-labeled box
    Synth {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        frames: usize,
    },
}

fn parse_bbox(s: &str) -> Result<BBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad bbox {s:?}, expected x,y,w,h")))?;
    match v[..] {
        [x, y, w, h] if w > 0.0 && h > 0.0 => Ok(BBox::new(x, y, w, h)),
        _ => Err(Error::Config(format!("bad bbox {s:?}, expected x,y,w,h with w, h > 0"))),
    }
}

fn load_frame(rgb: &Path, depth: &Path, scale: f64, timestamp: f64) -> Result<FramePair> {
    FramePair::new(timestamp, RgbImage::load(rgb)?, DepthImage::load(depth, scale)?)
}

fn load_mask(path: Option<&PathBuf>, width: usize, height: usize) -> Result<Option<AlphaMask>> {
    let Some(p) = path else {
        return Ok(None);
    };
    let m = AlphaMask::load_png(p)?;
    if (m.width, m.height) != (width, height) {
        return Err(Error::DimensionMismatch(format!(
            "mask {} is {}x{}, frame is {width}x{height}",
            p.display(),
            m.width,
            m.height
        )));
    }
    Ok(Some(m))
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            out_ply,
            out_traj,
            debug_masks,
        } => {
            let mut cfg = config.load()?.resolve()?;
            if let Some(p) = out_ply {
                cfg.out_ply = p;
            }
            if let Some(p) = out_traj {
                cfg.out_traj = p;
            }
            if debug_masks.is_some() {
                cfg.debug_masks = debug_masks;
            }
            let summary = run(&cfg)?;
            println!("{summary}");
            if summary.majority_failed() {
                error!(
                    "{} of {} alignments failed",
                    summary.alignment_failures, summary.alignments
                );
                return Ok(ExitCode::from(2));
            }
        }
        Command::Segment {
            config,
            rgb,
            bboxes,
            strokes,
            out,
        } => {
            let params = config.load()?.grabcut_params()?;
            let img = RgbImage::load(&rgb)?;
            let boxes = bboxes.iter().map(|s| parse_bbox(s)).collect::<Result<Vec<_>>>()?;
            let strokes = match &strokes {
                Some(p) => load_strokes(p, img.width, img.height)?,
                None => Vec::new(),
            };
            let (mask, outcomes) = segment_boxes(&img, &boxes, &strokes, &params)?;
            mask.save_png(&out)?;
            for (i, o) in outcomes.iter().enumerate() {
                let trace: Vec<String> = o.energy_trace.iter().map(|e| format!("{e:.6}")).collect();
                println!("box {i}: iterations {} energy {}", o.iterations, trace.join(" "));
            }
            println!("mask pixels: {}", mask.count());
        }
        Command::Align {
            config,
            rgb1,
            depth1,
            rgb2,
            depth2,
            mask1,
            mask2,
            timestamp,
        } => {
            let raw = config.load()?;
            let params = raw.alignment_params()?;
            let scale = raw.depth_scale()?;
            let f1 = load_frame(&rgb1, &depth1, scale, timestamp)?;
            let f2 = load_frame(&rgb2, &depth2, scale, timestamp)?;
            if (f1.width(), f1.height()) != (f2.width(), f2.height()) {
                return Err(Error::DimensionMismatch("frames differ in size".into()));
            }
            let c = raw.camera()?;
            let k = Intrinsics::new(c.fx, c.fy, c.ox, c.oy, f1.width(), f1.height())?;
            let m1 = load_mask(mask1.as_ref(), k.width, k.height)?;
            let m2 = load_mask(mask2.as_ref(), k.width, k.height)?;
            let r = align_frames(&f1, &f2, m1.as_ref(), m2.as_ref(), &k, &Default::default(), &params)?;
            println!("{}", TrajectoryEntry::from_pose(timestamp, &r.pose).to_line());
        }
        Command::Reconstruct {
            config,
            traj,
            masks,
            out_ply,
        } => {
            let mut cfg = config.load()?.resolve()?;
            if let Some(p) = out_ply {
                cfg.out_ply = p;
            }
            let entries = read_trajectory(&traj)?;
            let cloud = reconstruct(&cfg, &entries, &traj, masks.as_deref())?;
            write_ply(&cloud, &cfg.out_ply)?;
            println!("points: {}", cloud.len());
        }
        Command::Synth { out, frames } => {
            if frames == 0 {
                return Err(Error::Config("--frames must be at least 1".into()));
            }
            let paths = write_dataset(&out, &moving_person_sequence(frames), 6.0)?;
            println!("config: {}", paths.config.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
