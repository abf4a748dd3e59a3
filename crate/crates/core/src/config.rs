//! `key = value` configuration with typed accessors and documented defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::detection::DynamicPolicy;
use crate::error::{Error, Result};
use crate::odometry::{AlignmentParams, HuberThresholds, LossWeights};
use crate::segmentation::GrabcutParams;

/// A recognized key, its default (empty = unset) and a one-line description.
pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        default,
        help,
    }
}

pub const KEYS: &[KeySpec] = &[
    key("rgb_index", "", "RGB index file, `timestamp filename` per line (required)"),
    key("depth_index", "", "depth index file, same format (required)"),
    key("detections", "", "JSON-lines detection file; unset = no detections"),
    key("strokes_dir", "", "directory of `<timestamp>.strokes.png` stroke images; unset = none"),
    key("depth_scale", "5000", "raw depth units per meter"),
    key("max_dt", "0.02", "max RGB/depth/detection timestamp difference in seconds"),
    key("fx", "525.0", "focal length x in pixels"),
    key("fy", "525.0", "focal length y in pixels"),
    key("ox", "319.5", "principal point x in pixels"),
    key("oy", "239.5", "principal point y in pixels"),
    key("dynamic_classes", "person", "comma-separated labels treated as dynamic"),
    key("min_confidence", "0.0", "minimum detection confidence for a dynamic box"),
    key("gmm_components", "5", "Gaussian components per color model"),
    key("gamma", "50.0", "smoothness weight"),
    key("grabcut_max_iters", "10", "maximum segmentation iterations per box"),
    key("grabcut_tol", "1e-4", "stop when the relative energy decrease falls below this"),
    key("mask_dilation_px", "2", "dynamic mask dilation radius in pixels"),
    key("w_intensity", "1.0", "weight of squared intensity residuals"),
    key("w_depth", "1.0", "weight of squared depth residuals"),
    key("huber", "off", "robust Huber loss: on | off"),
    key("huber_delta_intensity", "0.1", "Huber threshold for intensity residuals"),
    key("huber_delta_depth", "0.05", "Huber threshold for depth residuals in meters"),
    key("pyramid_levels", "4", "image pyramid levels for coarse-to-fine alignment"),
    key("gn_max_iters", "20", "Gauss-Newton iterations per level"),
    key("gn_tol", "1e-6", "stop when the pose increment norm falls below this"),
    key("min_valid_fraction", "0.1", "minimum fraction of valid residuals"),
    key("init_from_previous", "true", "start each alignment from the previous estimate: true | false"),
    key("stride", "1", "full-resolution pixel stride for alignment"),
    key("fusion_stride", "2", "pixel stride when back-projecting into the cloud"),
    key("voxel_size", "0.01", "voxel edge in meters for downsampling; 0 keeps every point"),
    key("out_ply", "cloud.ply", "output point cloud"),
    key("out_traj", "trajectory.txt", "output trajectory"),
    key("debug_masks", "", "directory for `<timestamp>.mask.png` masks; unset = not written"),
];

/// Text block listing every key with its default, for `--help`.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (`key = value`, `#` comments; relative paths resolve against the config file):\n");
    for k in KEYS {
        let default = if k.default.is_empty() { "unset" } else { k.default };
        s.push_str(&format!("  {:<22} {} [default: {}]\n", k.name, k.help, default));
    }
    s
}

fn spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

/// Raw key/value pairs before typing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
    base_dir: PathBuf,
}

impl RawConfig {
    /// Empty config whose relative paths resolve against `base_dir`.
    pub fn new(base_dir: &Path) -> Self {
        RawConfig {
            values: BTreeMap::new(),
            base_dir: base_dir.to_path_buf(),
        }
    }

    pub fn parse(text: &str, base_dir: &Path, source_name: &str) -> Result<Self> {
        let mut cfg = RawConfig::new(base_dir);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source_name, i + 1, "expected `key = value`"))?;
            let k = k.trim();
            if spec(k).is_none() {
                return Err(Error::parse(source_name, i + 1, format!("unknown key {k:?}")));
            }
            if cfg.values.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::parse(source_name, i + 1, format!("duplicate key {k:?}")));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base, &path.display().to_string())
    }

    /// Sets a value; used for command-line overrides, which win over the file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if spec(key).is_none() {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Parses `key=value` and applies it with [`Self::set`].
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    fn get(&self, key: &str) -> &str {
        match self.values.get(key) {
            Some(v) => v,
            None => spec(key).map(|k| k.default).unwrap_or(""),
        }
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    fn float(&self, key: &str) -> Result<f64> {
        let v: f64 = self.num(key)?;
        if !v.is_finite() {
            return Err(Error::Config(format!("{key}: must be finite")));
        }
        Ok(v)
    }

    fn non_negative(&self, key: &str) -> Result<f64> {
        let v = self.float(key)?;
        if v < 0.0 {
            return Err(Error::Config(format!("{key}: must be >= 0, got {v}")));
        }
        Ok(v)
    }

    fn positive(&self, key: &str) -> Result<f64> {
        let v = self.float(key)?;
        if v <= 0.0 {
            return Err(Error::Config(format!("{key}: must be > 0, got {v}")));
        }
        Ok(v)
    }

    fn boolean(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "on" | "yes" | "1" => Ok(true),
            "false" | "off" | "no" | "0" => Ok(false),
            v => Err(Error::Config(format!("{key}: expected true/false or on/off, got {v:?}"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| self.base_dir.join(v))
    }

    pub fn grabcut_params(&self) -> Result<GrabcutParams> {
        let components: usize = self.num("gmm_components")?;
        if components == 0 {
            return Err(Error::Config("gmm_components: must be >= 1".into()));
        }
        Ok(GrabcutParams {
            components,
            gamma: self.non_negative("gamma")?,
            max_iters: self.num("grabcut_max_iters")?,
            tol: self.non_negative("grabcut_tol")?,
        })
    }

    pub fn alignment_params(&self) -> Result<AlignmentParams> {
        let levels: usize = self.num("pyramid_levels")?;
        if levels == 0 {
            return Err(Error::Config("pyramid_levels: must be >= 1".into()));
        }
        let stride: usize = self.num("stride")?;
        if stride == 0 {
            return Err(Error::Config("stride: must be >= 1".into()));
        }
        let fraction = self.non_negative("min_valid_fraction")?;
        if fraction > 1.0 {
            return Err(Error::Config("min_valid_fraction: must be <= 1".into()));
        }
        let huber = if self.boolean("huber")? {
            Some(HuberThresholds {
                intensity: self.positive("huber_delta_intensity")?,
                depth: self.positive("huber_delta_depth")?,
            })
        } else {
            None
        };
        Ok(AlignmentParams {
            weights: LossWeights {
                intensity: self.non_negative("w_intensity")?,
                depth: self.non_negative("w_depth")?,
                huber,
            },
            pyramid_levels: levels,
            max_iters: self.num("gn_max_iters")?,
            tol: self.non_negative("gn_tol")?,
            min_valid_fraction: fraction,
            mask_dilation_px: self.num("mask_dilation_px")?,
            stride,
        })
    }

    pub fn policy(&self) -> Result<DynamicPolicy> {
        let classes: Vec<&str> = self
            .get("dynamic_classes")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        DynamicPolicy::new(classes, self.float("min_confidence")?)
    }

    pub fn depth_scale(&self) -> Result<f64> {
        self.positive("depth_scale")
    }

    /// Focal lengths and principal point; the image size comes from the frames.
    pub fn camera(&self) -> Result<CameraParams> {
        Ok(CameraParams {
            fx: self.positive("fx")?,
            fy: self.positive("fy")?,
            ox: self.float("ox")?,
            oy: self.float("oy")?,
        })
    }

    pub fn resolve(&self) -> Result<PipelineConfig> {
        let required = |key: &str| {
            self.path(key)
                .ok_or_else(|| Error::Config(format!("{key} is required")))
        };
        let max_dt = self.non_negative("max_dt")?;
        let voxel_size = self.non_negative("voxel_size")?;
        let fusion_stride: usize = self.num("fusion_stride")?;
        if fusion_stride == 0 {
            return Err(Error::Config("fusion_stride: must be >= 1".into()));
        }
        Ok(PipelineConfig {
            rgb_index: required("rgb_index")?,
            depth_index: required("depth_index")?,
            detections: self.path("detections"),
            strokes_dir: self.path("strokes_dir"),
            depth_scale: self.depth_scale()?,
            max_dt,
            camera: self.camera()?,
            policy: self.policy()?,
            grabcut: self.grabcut_params()?,
            alignment: self.alignment_params()?,
            init_from_previous: self.boolean("init_from_previous")?,
            fusion_stride,
            voxel_size,
            out_ply: required("out_ply")?,
            out_traj: required("out_traj")?,
            debug_masks: self.path("debug_masks"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams {
    pub fx: f64,
    pub fy: f64,
    pub ox: f64,
    pub oy: f64,
}

/// Fully typed configuration of a pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub rgb_index: PathBuf,
    pub depth_index: PathBuf,
    pub detections: Option<PathBuf>,
    pub strokes_dir: Option<PathBuf>,
    pub depth_scale: f64,
    pub max_dt: f64,
    pub camera: CameraParams,
    pub policy: DynamicPolicy,
    pub grabcut: GrabcutParams,
    pub alignment: AlignmentParams,
    pub init_from_previous: bool,
    pub fusion_stride: usize,
    pub voxel_size: f64,
    pub out_ply: PathBuf,
    pub out_traj: PathBuf,
    pub debug_masks: Option<PathBuf>,
}
