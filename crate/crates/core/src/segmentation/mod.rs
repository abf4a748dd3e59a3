//! GrabCut foreground extraction of dynamic objects from their detection boxes.

mod energy;
mod gmm;
mod grabcut;
pub mod maxflow;

use std::path::Path;

use image::{GrayImage, Luma};

use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

pub use energy::{
    build_graph, compute_beta, data_term, min_cut_labeling, neighbor_pairs, smoothness_term,
    total_energy, LARGE_ENERGY,
};
pub use gmm::{assign_components, fit_gmm, regularization_epsilon, Gaussian, GmmModel, Mixture};
pub use grabcut::{grabcut, segment_boxes, GrabcutOutcome, GrabcutParams};
pub use maxflow::{min_cut, FlowGraph, MinCut};

/// RGB color normalized to `[0, 1]` per channel.
pub type Color = [f64; 3];

/// Image with normalized colors, the input to every energy computation.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Color>,
}

impl ColorImage {
    pub fn from_rgb(img: &RgbImage) -> Self {
        ColorImage {
            width: img.width,
            height: img.height,
            data: img
                .data
                .chunks_exact(3)
                .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
                .collect(),
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<Color>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "color buffer has {} pixels, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(ColorImage {
            width,
            height,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrimapLabel {
    DefiniteBackground,
    DefiniteForeground,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trimap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<TrimapLabel>,
}

impl Trimap {
    pub fn filled(width: usize, height: usize, label: TrimapLabel) -> Self {
        Trimap {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> TrimapLabel {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, label: TrimapLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

/// Outside the box is definite background, inside is unknown.
pub fn init_trimap(bbox: &BBox, width: usize, height: usize) -> Result<Trimap> {
    let rect = bbox.to_pixel_rect(width, height).ok_or(Error::InvalidBbox)?;
    let mut t = Trimap::filled(width, height, TrimapLabel::DefiniteBackground);
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            t.labels[y * width + x] = TrimapLabel::Unknown;
        }
    }
    Ok(t)
}

/// A set of pixels forced to one label.
#[derive(Debug, Clone, PartialEq)]
pub struct Stroke {
    pub pixels: Vec<(usize, usize)>,
    pub label: TrimapLabel,
}

/// Applies strokes in order; later strokes win. Pixels outside the image are ignored.
pub fn apply_strokes(trimap: &Trimap, strokes: &[Stroke]) -> Trimap {
    let mut out = trimap.clone();
    for s in strokes {
        for &(x, y) in &s.pixels {
            if x < out.width && y < out.height {
                out.labels[y * out.width + x] = s.label;
            }
        }
    }
    out
}

/// Reads a stroke image: 255 forces foreground, 0 forces background, anything
/// else leaves the pixel untouched.
pub fn load_strokes(path: &Path, width: usize, height: usize) -> Result<Vec<Stroke>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    if img.width() as usize != width || img.height() as usize != height {
        return Err(Error::DimensionMismatch(format!(
            "stroke image {} is {}x{}, frame is {width}x{height}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (x, y, p) in img.enumerate_pixels() {
        match p.0[0] {
            255 => fg.push((x as usize, y as usize)),
            0 => bg.push((x as usize, y as usize)),
            _ => {}
        }
    }
    Ok(vec![
        Stroke {
            pixels: fg,
            label: TrimapLabel::DefiniteForeground,
        },
        Stroke {
            pixels: bg,
            label: TrimapLabel::DefiniteBackground,
        },
    ])
}

/// Binary per-pixel labeling: 1 = foreground (dynamic), 0 = background (static).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AlphaMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl AlphaMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        AlphaMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_bools(width: usize, height: usize, v: &[bool]) -> Self {
        AlphaMask {
            width,
            height,
            data: v.iter().map(|b| *b as u8).collect(),
        }
    }

    #[inline]
    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn union_with(&mut self, other: &AlphaMask) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }

    /// Square dilation by `radius` pixels (Chebyshev distance).
    pub fn dilate(&self, radius: usize) -> AlphaMask {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        let mut horiz = vec![0u8; w * h];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                horiz[y * w + x] = row[lo..=hi].iter().any(|v| *v != 0) as u8;
            }
        }
        let mut out = vec![0u8; w * h];
        for x in 0..w {
            for y in 0..h {
                let lo = y.saturating_sub(radius);
                let hi = (y + radius).min(h - 1);
                out[y * w + x] = (lo..=hi).any(|yy| horiz[yy * w + x] != 0) as u8;
            }
        }
        AlphaMask {
            width: w,
            height: h,
            data: out,
        }
    }

    /// Halves the resolution; a coarse pixel is set if any of its 2x2 block is.
    pub fn downsample_any(&self) -> AlphaMask {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let any = self.is_set(2 * x, 2 * y)
                    || self.is_set(2 * x + 1, 2 * y)
                    || self.is_set(2 * x, 2 * y + 1)
                    || self.is_set(2 * x + 1, 2 * y + 1);
                data.push(any as u8);
            }
        }
        AlphaMask {
            width: w,
            height: h,
            data,
        }
    }

    /// 8-bit PNG, 255 = dynamic.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.is_set(x as usize, y as usize) { 255 } else { 0 }])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Any nonzero sample counts as dynamic.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        Ok(AlphaMask {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw().into_iter().map(|v| (v != 0) as u8).collect(),
        })
    }
}

/// Component index per pixel, 0-based (`0..K`), referring to the mixture of
/// the pixel's current label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentAssignment {
    pub width: usize,
    pub height: usize,
    pub data: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trimap_from_box() {
        let t = init_trimap(&BBox::new(0.0, 0.0, 8.0, 6.0), 8, 6).unwrap();
        assert_eq!(t.count(TrimapLabel::Unknown), 48);

        let t = init_trimap(&BBox::new(0.0, 0.0, 4.0, 6.0), 8, 6).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let expected = if x < 4 {
                    TrimapLabel::Unknown
                } else {
                    TrimapLabel::DefiniteBackground
                };
                assert_eq!(t.get(x, y), expected);
            }
        }

        assert!(matches!(
            init_trimap(&BBox::new(20.0, 20.0, 3.0, 3.0), 8, 6),
            Err(Error::InvalidBbox)
        ));
    }

    #[test]
    fn strokes_last_wins() {
        let t = init_trimap(&BBox::new(0.0, 0.0, 2.0, 2.0), 4, 4).unwrap();
        assert_eq!(apply_strokes(&t, &[]), t);

        let fg = Stroke {
            pixels: vec![(3, 3)],
            label: TrimapLabel::DefiniteForeground,
        };
        let out = apply_strokes(&t, std::slice::from_ref(&fg));
        assert_eq!(out.get(3, 3), TrimapLabel::DefiniteForeground);

        let bg = Stroke {
            pixels: vec![(3, 3)],
            label: TrimapLabel::DefiniteBackground,
        };
        let out = apply_strokes(&t, &[fg, bg]);
        assert_eq!(out.get(3, 3), TrimapLabel::DefiniteBackground);
    }

    #[test]
    fn mask_dilation_and_downsampling() {
        let mut m = AlphaMask::zeros(7, 5);
        m.data[2 * 7 + 3] = 1;
        let d = m.dilate(2);
        assert_eq!(d.count(), 25);
        assert!(d.is_set(1, 0) && d.is_set(5, 4) && !d.is_set(0, 2) && !d.is_set(6, 2));
        assert_eq!(m.dilate(0), m);

        let c = m.downsample_any();
        assert_eq!((c.width, c.height), (3, 2));
        assert_eq!(c.data, vec![0, 0, 0, 0, 1, 0]);
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mut m = AlphaMask::zeros(5, 3);
        m.data[4] = 1;
        m.data[7] = 1;
        m.save_png(&p).unwrap();
        assert_eq!(AlphaMask::load_png(&p).unwrap(), m);
    }
}
