//! Frame loading, timestamp association, intensity conversion, pyramids and
//! sub-pixel sampling.
//!
//! Datasets follow the TUM RGB-D layout: `rgb.txt` / `depth.txt` index files
//! with `timestamp path` lines, 8-bit RGB PNGs and 16-bit depth PNGs.
//! Invalid depth is stored as exactly `0.0` everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::geometry::Pixel;

pub const DEFAULT_DEPTH_SCALE: f64 = 5000.0;
pub const DEFAULT_MAX_DT: f64 = 0.02;
pub const DEFAULT_PYRAMID_LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "rgb buffer has {} bytes, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        RgbImage {
            width,
            height,
            data: color.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(RgbImage {
            width: w as usize,
            height: h as usize,
            data: img.into_raw(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length checked at construction");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Metric depth in meters, `0.0` = invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth buffer has {} samples, expected {}",
                data.len(),
                width * height
            )));
        }
        if let Some(bad) = data.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::InvalidDepth(*bad));
        }
        Ok(DepthImage {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Loads a 16-bit single-channel PNG and converts with [`decode_depth`].
    pub fn load(path: &Path, scale: f64) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let img = match img {
            image::DynamicImage::ImageLuma16(buf) => buf,
            other => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: 0,
                    msg: format!("expected 16-bit single-channel depth, got {:?}", other.color()),
                })
            }
        };
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|r| decode_depth(r, scale)).collect();
        Ok(DepthImage {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    /// Writes a 16-bit PNG; values are rounded to the nearest raw unit.
    pub fn save(&self, path: &Path, scale: f64) -> Result<()> {
        let raw: Vec<u16> = self
            .data
            .iter()
            .map(|d| (d * scale).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer length checked at construction");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Bilinear depth sample; `None` when out of bounds or any contributing
    /// neighbor is invalid.
    pub fn sample(&self, x: Pixel) -> Option<f64> {
        let cell = Cell::locate(x, self.width, self.height, false)?;
        let mut acc = 0.0;
        for (idx, w) in cell.taps(self.width) {
            if w > 0.0 {
                let d = self.data[idx];
                if d <= 0.0 {
                    return None;
                }
                acc += w * d;
            }
        }
        Some(acc)
    }

    /// Bilinear sample plus the derivative of the interpolant, `(value, d/dx, d/dy)`.
    /// Requires all four cell corners inside the image and valid.
    pub fn sample_with_gradient(&self, x: Pixel) -> Option<(f64, f64, f64)> {
        let cell = Cell::locate(x, self.width, self.height, true)?;
        let c = cell.corners(&self.data, self.width);
        if c.iter().any(|d| *d <= 0.0) {
            return None;
        }
        Some(cell.value_and_gradient(c))
    }
}

/// Single-channel intensity in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl IntensityImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "intensity buffer has {} samples, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(IntensityImage {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample; `None` when a contributing neighbor lies outside the image.
    pub fn sample(&self, x: Pixel) -> Option<f64> {
        let cell = Cell::locate(x, self.width, self.height, false)?;
        Some(cell.taps(self.width).map(|(i, w)| w * self.data[i]).sum())
    }

    /// Bilinear sample plus the derivative of the interpolant.
    pub fn sample_with_gradient(&self, x: Pixel) -> Option<(f64, f64, f64)> {
        let cell = Cell::locate(x, self.width, self.height, true)?;
        Some(cell.value_and_gradient(cell.corners(&self.data, self.width)))
    }
}

/// The interpolation cell containing a continuous pixel position.
struct Cell {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
}

impl Cell {
    /// With `full = false`, a zero fractional offset does not require the
    /// next row/column to exist, so integer positions on the last row or
    /// column remain addressable.
    fn locate(p: Pixel, width: usize, height: usize, full: bool) -> Option<Cell> {
        if !(p.x.is_finite() && p.y.is_finite()) || p.x < 0.0 || p.y < 0.0 {
            return None;
        }
        let x0f = p.x.floor();
        let y0f = p.y.floor();
        let fx = p.x - x0f;
        let fy = p.y - y0f;
        let x0 = x0f as usize;
        let y0 = y0f as usize;
        let need_x = if full || fx > 0.0 { x0 + 1 } else { x0 };
        let need_y = if full || fy > 0.0 { y0 + 1 } else { y0 };
        if need_x >= width || need_y >= height {
            return None;
        }
        Some(Cell { x0, y0, fx, fy })
    }

    fn taps(&self, width: usize) -> impl Iterator<Item = (usize, f64)> {
        let base = self.y0 * width + self.x0;
        let (fx, fy) = (self.fx, self.fy);
        let mut out = [(base, (1.0 - fx) * (1.0 - fy)), (0, 0.0), (0, 0.0), (0, 0.0)];
        let mut n = 1;
        if fx > 0.0 {
            out[n] = (base + 1, fx * (1.0 - fy));
            n += 1;
        }
        if fy > 0.0 {
            out[n] = (base + width, (1.0 - fx) * fy);
            n += 1;
            if fx > 0.0 {
                out[n] = (base + width + 1, fx * fy);
                n += 1;
            }
        }
        out.into_iter().take(n)
    }

    fn corners(&self, data: &[f64], width: usize) -> [f64; 4] {
        let base = self.y0 * width + self.x0;
        [data[base], data[base + 1], data[base + width], data[base + width + 1]]
    }

    fn value_and_gradient(&self, [c00, c10, c01, c11]: [f64; 4]) -> (f64, f64, f64) {
        let (fx, fy) = (self.fx, self.fy);
        let top = c00 + fx * (c10 - c00);
        let bottom = c01 + fx * (c11 - c01);
        let value = top + fy * (bottom - top);
        let gx = (1.0 - fy) * (c10 - c00) + fy * (c11 - c01);
        let gy = bottom - top;
        (value, gx, gy)
    }
}

/// Free-function form of the bilinear samplers.
pub fn sample_bilinear(img: &IntensityImage, x: Pixel) -> Option<f64> {
    img.sample(x)
}

/// Raw 16-bit depth to meters; raw 0 is the invalid marker and maps to 0.0.
pub fn decode_depth(raw: u16, scale: f64) -> f64 {
    if raw == 0 {
        0.0
    } else {
        raw as f64 / scale
    }
}

pub fn rgb_to_intensity(img: &RgbImage) -> IntensityImage {
    let data = img
        .data
        .chunks_exact(3)
        .map(|c| (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0)
        .collect();
    IntensityImage {
        width: img.width,
        height: img.height,
        data,
    }
}

fn downsample_intensity(img: &IntensityImage) -> IntensityImage {
    let (w, h) = (img.width / 2, img.height / 2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let s = img.get(2 * x, 2 * y)
                + img.get(2 * x + 1, 2 * y)
                + img.get(2 * x, 2 * y + 1)
                + img.get(2 * x + 1, 2 * y + 1);
            data.push(s * 0.25);
        }
    }
    IntensityImage {
        width: w,
        height: h,
        data,
    }
}

/// Picks the first valid sample of each 2x2 block in raster order.
fn downsample_depth(img: &DepthImage) -> DepthImage {
    let (w, h) = (img.width / 2, img.height / 2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let block = [
                img.get(2 * x, 2 * y),
                img.get(2 * x + 1, 2 * y),
                img.get(2 * x, 2 * y + 1),
                img.get(2 * x + 1, 2 * y + 1),
            ];
            data.push(block.into_iter().find(|d| *d > 0.0).unwrap_or(0.0));
        }
    }
    DepthImage {
        width: w,
        height: h,
        data,
    }
}

#[derive(Debug, Clone)]
pub struct IntensityPyramid {
    pub levels: Vec<IntensityImage>,
}

#[derive(Debug, Clone)]
pub struct DepthPyramid {
    pub levels: Vec<DepthImage>,
}

/// Builds `levels` levels (level 0 = input). Stops early if a level would
/// have a zero dimension.
pub fn build_pyramid(
    intensity: &IntensityImage,
    depth: &DepthImage,
    levels: usize,
) -> Result<(IntensityPyramid, DepthPyramid)> {
    if intensity.width != depth.width || intensity.height != depth.height {
        return Err(Error::DimensionMismatch(format!(
            "intensity {}x{} vs depth {}x{}",
            intensity.width, intensity.height, depth.width, depth.height
        )));
    }
    let mut ip = vec![intensity.clone()];
    let mut dp = vec![depth.clone()];
    for _ in 1..levels.max(1) {
        let last = ip.last().unwrap();
        if last.width < 2 || last.height < 2 {
            break;
        }
        let next_i = downsample_intensity(last);
        let next_d = downsample_depth(dp.last().unwrap());
        ip.push(next_i);
        dp.push(next_d);
    }
    Ok((IntensityPyramid { levels: ip }, DepthPyramid { levels: dp }))
}

/// One timestamp-associated RGB-D frame.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub timestamp: f64,
    pub rgb: RgbImage,
    pub depth: DepthImage,
}

impl FramePair {
    pub fn new(timestamp: f64, rgb: RgbImage, depth: DepthImage) -> Result<Self> {
        if rgb.width != depth.width || rgb.height != depth.height {
            return Err(Error::DimensionMismatch(format!(
                "rgb {}x{} vs depth {}x{}",
                rgb.width, rgb.height, depth.width, depth.height
            )));
        }
        Ok(FramePair {
            timestamp,
            rgb,
            depth,
        })
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn intensity(&self) -> IntensityImage {
        rgb_to_intensity(&self.rgb)
    }

    pub fn load(assoc: &Association, depth_scale: f64) -> Result<Self> {
        let rgb = RgbImage::load(&assoc.rgb_path)?;
        let depth = DepthImage::load(&assoc.depth_path, depth_scale)?;
        FramePair::new(assoc.timestamp, rgb, depth)
    }
}

/// One line of an index file.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub timestamp: f64,
    pub path: PathBuf,
}

/// Parses `timestamp path` lines; `#` lines and blank lines are skipped.
/// Relative paths are resolved against `base_dir`.
pub fn parse_index(text: &str, base_dir: &Path, source_name: &str) -> Result<Vec<IndexEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let ts = parts.next().unwrap_or_default();
        let timestamp: f64 = ts
            .parse()
            .map_err(|_| Error::parse(source_name, i + 1, format!("bad timestamp {ts:?}")))?;
        let file = parts
            .next()
            .ok_or_else(|| Error::parse(source_name, i + 1, "missing filename"))?;
        out.push(IndexEntry {
            timestamp,
            path: base_dir.join(file),
        });
    }
    out.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(out)
}

pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_index(&text, base, &path.display().to_string())
}

/// An RGB entry matched to a depth entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    /// The RGB timestamp; used as the frame timestamp downstream.
    pub timestamp: f64,
    pub depth_timestamp: f64,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
}

/// Greedy nearest-neighbor association.
///
/// Candidate pairs within `max_dt` are taken in order of increasing `|dt|`;
/// each RGB and each depth entry is used at most once. The result is sorted
/// by RGB timestamp.
pub fn associate(
    rgb: &[IndexEntry],
    depth: &[IndexEntry],
    max_dt: f64,
) -> Result<Vec<Association>> {
    let mut candidates = Vec::new();
    for (i, r) in rgb.iter().enumerate() {
        // depth entries are sorted; restrict to the window around r
        let lo = depth.partition_point(|d| d.timestamp < r.timestamp - max_dt);
        for (j, d) in depth.iter().enumerate().skip(lo) {
            let dt = (d.timestamp - r.timestamp).abs();
            if d.timestamp > r.timestamp + max_dt {
                break;
            }
            if dt <= max_dt {
                candidates.push((dt, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut rgb_used = vec![false; rgb.len()];
    let mut depth_used = vec![false; depth.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if rgb_used[i] || depth_used[j] {
            continue;
        }
        rgb_used[i] = true;
        depth_used[j] = true;
        pairs.push((i, j));
    }
    if pairs.is_empty() {
        return Err(Error::NoAssociations);
    }
    pairs.sort_unstable();
    Ok(pairs
        .into_iter()
        .map(|(i, j)| Association {
            timestamp: rgb[i].timestamp,
            depth_timestamp: depth[j].timestamp,
            rgb_path: rgb[i].path.clone(),
            depth_path: depth[j].path.clone(),
        })
        .collect())
}
