//! Dense frame-to-frame alignment on intensity and depth residuals.
//!
//! For a pixel `x` of frame 1 with depth `Z1(x)`, the warp is
//! `x' = pi(T * pi^-1(x, Z1(x)))` and the residuals are
//!
//! ```text
//! r_I = I2(x') - I1(x)
//! r_z = Z2(x') - [T * pi^-1(x, Z1(x))]_z
//! ```
//!
//! The pose is refined coarse-to-fine with damped Gauss-Newton using
//! left-multiplicative increments `T <- exp(delta) * T`.

use nalgebra::{Matrix6, Point3, Vector3, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{backproject, project, Intrinsics, Pixel, Pose, Twist};
use crate::imaging::{
    build_pyramid, DepthImage, DepthPyramid, FramePair, IntensityImage, IntensityPyramid,
};
use crate::segmentation::AlphaMask;

/// Rows per accumulation block; blocks are reduced in a fixed order.
const ROW_BLOCK: usize = 8;
const MAX_DAMPING_RETRIES: usize = 5;
/// Interpolation cells whose depth range exceeds this fraction of their
/// nearest depth straddle a depth edge and are not sampled.
pub const DEPTH_EDGE_RATIO: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberThresholds {
    pub intensity: f64,
    pub depth: f64,
}

impl Default for HuberThresholds {
    fn default() -> Self {
        HuberThresholds {
            intensity: 0.1,
            depth: 0.05,
        }
    }
}

/// Weights of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub intensity: f64,
    pub depth: f64,
    pub huber: Option<HuberThresholds>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            intensity: 1.0,
            depth: 1.0,
            huber: None,
        }
    }
}

impl LossWeights {
    #[inline]
    fn rho(r: f64, delta: Option<f64>) -> f64 {
        match delta {
            Some(d) if r.abs() > d => 2.0 * d * r.abs() - d * d,
            _ => r * r,
        }
    }

    /// IRLS weight matching [`Self::rho`].
    #[inline]
    fn irls(r: f64, delta: Option<f64>) -> f64 {
        match delta {
            Some(d) if r.abs() > d => d / r.abs(),
            _ => 1.0,
        }
    }

    fn per_sample(&self, r_i: f64, r_z: f64) -> f64 {
        self.intensity * Self::rho(r_i, self.huber.map(|h| h.intensity))
            + self.depth * Self::rho(r_z, self.huber.map(|h| h.depth))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentParams {
    pub weights: LossWeights,
    pub pyramid_levels: usize,
    pub max_iters: usize,
    /// Convergence threshold on the increment norm.
    pub tol: f64,
    pub min_valid_fraction: f64,
    pub mask_dilation_px: usize,
    /// Pixel stride at full resolution; coarser levels use every pixel.
    pub stride: usize,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        AlignmentParams {
            weights: LossWeights::default(),
            pyramid_levels: 4,
            max_iters: 20,
            tol: 1e-6,
            min_valid_fraction: 0.1,
            mask_dilation_px: 2,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSample {
    pub pixel: Pixel,
    pub r_i: f64,
    pub r_z: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    /// Frame-1-to-frame-2 transform: `P2 = pose * P1`.
    pub pose: Pose,
    pub final_cost: f64,
    /// Coarsest level first.
    pub iterations_per_level: Vec<usize>,
    pub valid_pixel_fraction: f64,
}

impl AlignmentResult {
    pub fn total_iterations(&self) -> usize {
        self.iterations_per_level.iter().sum()
    }
}

/// Pyramids and the dilated dynamic mask of one frame.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub intensity: IntensityPyramid,
    pub depth: DepthPyramid,
    /// Per level; a coarse pixel is masked if any pixel of its block is.
    pub mask: Option<Vec<AlphaMask>>,
}

impl PreparedFrame {
    pub fn new(
        frame: &FramePair,
        mask: Option<&AlphaMask>,
        levels: usize,
        dilation_px: usize,
    ) -> Result<Self> {
        Self::from_images(&frame.intensity(), &frame.depth, mask, levels, dilation_px)
    }

    pub fn from_images(
        intensity: &IntensityImage,
        depth: &DepthImage,
        mask: Option<&AlphaMask>,
        levels: usize,
        dilation_px: usize,
    ) -> Result<Self> {
        let (intensity, depth) = build_pyramid(intensity, depth, levels)?;
        let mask = match mask {
            Some(m) if m.count() > 0 => {
                if (m.width, m.height) != (depth.levels[0].width, depth.levels[0].height) {
                    return Err(Error::DimensionMismatch(format!(
                        "mask {}x{} vs frame {}x{}",
                        m.width, m.height, depth.levels[0].width, depth.levels[0].height
                    )));
                }
                let mut ms = vec![m.dilate(dilation_px)];
                for _ in 1..depth.levels.len() {
                    let next = ms.last().unwrap().downsample_any();
                    ms.push(next);
                }
                Some(ms)
            }
            _ => None,
        };
        Ok(PreparedFrame {
            intensity,
            depth,
            mask,
        })
    }

    pub fn levels(&self) -> usize {
        self.intensity.levels.len()
    }

    fn view(&self, level: usize) -> LevelView<'_> {
        LevelView {
            intensity: &self.intensity.levels[level],
            depth: &self.depth.levels[level],
            mask: self.mask.as_ref().map(|m| &m[level]),
        }
    }
}

#[derive(Clone, Copy)]
struct LevelView<'a> {
    intensity: &'a IntensityImage,
    depth: &'a DepthImage,
    mask: Option<&'a AlphaMask>,
}

impl LevelView<'_> {
    fn masked(&self, x: usize, y: usize) -> bool {
        self.mask.is_some_and(|m| m.is_set(x, y))
    }

    /// Whether any corner of the interpolation cell at `p` is masked.
    fn cell_masked(&self, p: Pixel) -> bool {
        let Some(m) = self.mask else {
            return false;
        };
        let x0 = p.x.floor() as usize;
        let y0 = p.y.floor() as usize;
        m.is_set(x0, y0) || m.is_set(x0 + 1, y0) || m.is_set(x0, y0 + 1) || m.is_set(x0 + 1, y0 + 1)
    }

    /// Expects a cell already validated by `sample_with_gradient`.
    fn cell_on_depth_edge(&self, p: Pixel) -> bool {
        let x0 = p.x.floor() as usize;
        let y0 = p.y.floor() as usize;
        let d = self.depth;
        let c = [d.get(x0, y0), d.get(x0 + 1, y0), d.get(x0, y0 + 1), d.get(x0 + 1, y0 + 1)];
        let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hi - lo > DEPTH_EDGE_RATIO * lo
    }
}

/// `pi(T * pi^-1(x, Z1(x)))`; `None` for invalid source depth or a point
/// that lands behind the camera.
pub fn warp(x: Pixel, t: &Pose, depth1: &DepthImage, k: &Intrinsics) -> Option<Pixel> {
    let z = depth1.sample(x)?;
    let p = backproject(x, z, k).ok()?;
    project(&t.transform_point(&p), k).ok()
}

/// Residuals and their derivatives with respect to a left increment of the pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizedSample {
    pub pixel: Pixel,
    pub r_i: f64,
    pub r_z: f64,
    pub j_i: Vector6<f64>,
    pub j_z: Vector6<f64>,
}

enum PixelEval {
    /// Masked or without source depth; not counted.
    Skipped,
    Invalid,
    Valid(LinearizedSample),
}

fn evaluate_pixel(
    f1: LevelView<'_>,
    f2: LevelView<'_>,
    t: &Pose,
    k: &Intrinsics,
    x: usize,
    y: usize,
) -> PixelEval {
    let z1 = f1.depth.get(x, y);
    if z1 <= 0.0 || f1.masked(x, y) {
        return PixelEval::Skipped;
    }
    let px = Pixel::new(x as f64, y as f64);
    let p = Point3::new((px.x - k.ox) / k.fx * z1, (px.y - k.oy) / k.fy * z1, z1);
    let q = t.transform_point(&p);
    if !(q.z > 0.0) {
        return PixelEval::Invalid;
    }
    let inv_z = 1.0 / q.z;
    let u = Pixel::new(q.x * k.fx * inv_z + k.ox, q.y * k.fy * inv_z + k.oy);
    let Some((i2, gix, giy)) = f2.intensity.sample_with_gradient(u) else {
        return PixelEval::Invalid;
    };
    let Some((z2, gzx, gzy)) = f2.depth.sample_with_gradient(u) else {
        return PixelEval::Invalid;
    };
    if f2.cell_masked(u) || f2.cell_on_depth_edge(u) {
        return PixelEval::Invalid;
    }

    // d(pixel)/dq rows: [fx/z, 0, -fx X/z^2], [0, fy/z, -fy Y/z^2]
    let chain = |gx: f64, gy: f64| -> Vector3<f64> {
        let a = gx * k.fx * inv_z;
        let b = gy * k.fy * inv_z;
        Vector3::new(a, b, -(a * q.x + b * q.y) * inv_z)
    };
    // dq/d(v, w) = [I | -[q]x], so a row g^T maps to (g, q x g)
    let to_twist = |g: Vector3<f64>| -> Vector6<f64> {
        let w = q.coords.cross(&g);
        Vector6::new(g.x, g.y, g.z, w.x, w.y, w.z)
    };
    let j_i = to_twist(chain(gix, giy));
    let dz = Vector6::new(0.0, 0.0, 1.0, q.y, -q.x, 0.0);
    let j_z = to_twist(chain(gzx, gzy)) - dz;

    PixelEval::Valid(LinearizedSample {
        pixel: px,
        r_i: i2 - f1.intensity.get(x, y),
        r_z: z2 - q.z,
        j_i,
        j_z,
    })
}

#[derive(Clone, Copy)]
struct Accum {
    h: Matrix6<f64>,
    g: Vector6<f64>,
    cost: f64,
    valid: usize,
    candidates: usize,
}

impl Accum {
    fn zero() -> Self {
        Accum {
            h: Matrix6::zeros(),
            g: Vector6::zeros(),
            cost: 0.0,
            valid: 0,
            candidates: 0,
        }
    }

    fn add(mut self, o: &Accum) -> Self {
        self.h += o.h;
        self.g += o.g;
        self.cost += o.cost;
        self.valid += o.valid;
        self.candidates += o.candidates;
        self
    }

    fn fraction(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.valid as f64 / self.candidates as f64
        }
    }

    fn mean_cost(&self) -> f64 {
        if self.valid == 0 {
            f64::INFINITY
        } else {
            self.cost / self.valid as f64
        }
    }
}

fn accumulate(
    f1: LevelView<'_>,
    f2: LevelView<'_>,
    t: &Pose,
    k: &Intrinsics,
    stride: usize,
    weights: &LossWeights,
    with_normal_equations: bool,
) -> Accum {
    let (w, h) = (f1.depth.width, f1.depth.height);
    let stride = stride.max(1);
    let rows: Vec<usize> = (0..h).step_by(stride).collect();
    let partials: Vec<Accum> = rows
        .par_chunks(ROW_BLOCK)
        .map(|block| {
            let mut acc = Accum::zero();
            for &y in block {
                for x in (0..w).step_by(stride) {
                    match evaluate_pixel(f1, f2, t, k, x, y) {
                        PixelEval::Skipped => {}
                        PixelEval::Invalid => acc.candidates += 1,
                        PixelEval::Valid(s) => {
                            acc.candidates += 1;
                            acc.valid += 1;
                            acc.cost += weights.per_sample(s.r_i, s.r_z);
                            if with_normal_equations {
                                let wi = weights.intensity
                                    * LossWeights::irls(s.r_i, weights.huber.map(|h| h.intensity));
                                let wz = weights.depth
                                    * LossWeights::irls(s.r_z, weights.huber.map(|h| h.depth));
                                acc.h += s.j_i * s.j_i.transpose() * wi + s.j_z * s.j_z.transpose() * wz;
                                acc.g += s.j_i * (wi * s.r_i) + s.j_z * (wz * s.r_z);
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect();
    partials.iter().fold(Accum::zero(), |a, b| a.add(b))
}

/// Residual samples for every unmasked frame-1 pixel with valid depth, at full
/// resolution. Samples whose warp fails are kept and flagged invalid.
pub fn compute_residuals(
    f1: &PreparedFrame,
    f2: &PreparedFrame,
    t: &Pose,
    k: &Intrinsics,
    min_valid_fraction: f64,
) -> Result<Vec<ResidualSample>> {
    let (v1, v2) = (f1.view(0), f2.view(0));
    let (w, h) = (v1.depth.width, v1.depth.height);
    let mut out = Vec::new();
    let mut valid = 0usize;
    for y in 0..h {
        for x in 0..w {
            match evaluate_pixel(v1, v2, t, k, x, y) {
                PixelEval::Skipped => {}
                PixelEval::Invalid => out.push(ResidualSample {
                    pixel: Pixel::new(x as f64, y as f64),
                    r_i: 0.0,
                    r_z: 0.0,
                    valid: false,
                }),
                PixelEval::Valid(s) => {
                    valid += 1;
                    out.push(ResidualSample {
                        pixel: s.pixel,
                        r_i: s.r_i,
                        r_z: s.r_z,
                        valid: true,
                    });
                }
            }
        }
    }
    let fraction = if out.is_empty() {
        0.0
    } else {
        valid as f64 / out.len() as f64
    };
    if fraction < min_valid_fraction {
        return Err(Error::InsufficientOverlap(fraction));
    }
    Ok(out)
}

/// Linearized residuals for the valid samples at one pyramid level.
pub fn linearize(
    f1: &PreparedFrame,
    f2: &PreparedFrame,
    t: &Pose,
    k: &Intrinsics,
    level: usize,
) -> Vec<LinearizedSample> {
    let kl = k.scaled_to_level(level);
    let (v1, v2) = (f1.view(level), f2.view(level));
    let mut out = Vec::new();
    for y in 0..v1.depth.height {
        for x in 0..v1.depth.width {
            if let PixelEval::Valid(s) = evaluate_pixel(v1, v2, t, &kl, x, y) {
                out.push(s);
            }
        }
    }
    out
}

/// Residuals of one frame-1 pixel at one level, or `None` if not valid.
pub fn residual_at(
    f1: &PreparedFrame,
    f2: &PreparedFrame,
    t: &Pose,
    k: &Intrinsics,
    level: usize,
    x: usize,
    y: usize,
) -> Option<(f64, f64)> {
    let kl = k.scaled_to_level(level);
    match evaluate_pixel(f1.view(level), f2.view(level), t, &kl, x, y) {
        PixelEval::Valid(s) => Some((s.r_i, s.r_z)),
        _ => None,
    }
}

/// Mean of `w_I r_I^2 + w_z r_z^2` (or the Huber form) over the valid samples.
pub fn cost(residuals: &[ResidualSample], weights: &LossWeights) -> f64 {
    let (sum, n) = residuals
        .iter()
        .filter(|s| s.valid)
        .fold((0.0, 0usize), |(s, n), r| (s + weights.per_sample(r.r_i, r.r_z), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn solve_damped(h: &Matrix6<f64>, g: &Vector6<f64>, lambda: f64) -> Option<Vector6<f64>> {
    let a = h + Matrix6::identity() * lambda;
    let chol = a.cholesky()?;
    let delta = -chol.solve(g);
    delta.iter().all(|v| v.is_finite()).then_some(delta)
}

/// Coarse-to-fine damped Gauss-Newton.
///
/// At each level the normal equations `(J^T W J + lambda I) delta = -J^T W r`
/// are solved with `lambda = 0` unless the system is singular. A step that
/// raises the cost is retried with a larger `lambda`; after five failed
/// retries the level ends.
pub fn estimate_pose(
    f1: &PreparedFrame,
    f2: &PreparedFrame,
    k: &Intrinsics,
    init: &Pose,
    params: &AlignmentParams,
) -> Result<AlignmentResult> {
    let levels = f1.levels().min(f2.levels());
    let mut pose = *init;
    let mut iterations_per_level = Vec::with_capacity(levels);

    for level in (0..levels).rev() {
        let kl = k.scaled_to_level(level);
        let (v1, v2) = (f1.view(level), f2.view(level));
        let stride = if level == 0 { params.stride } else { 1 };
        let eval = |p: &Pose, normal: bool| accumulate(v1, v2, p, &kl, stride, &params.weights, normal);

        let mut acc = eval(&pose, true);
        if acc.fraction() < params.min_valid_fraction {
            return Err(Error::InsufficientOverlap(acc.fraction()));
        }
        let mut current_cost = acc.mean_cost();
        if !current_cost.is_finite() {
            return Err(Error::Divergence);
        }

        let mut iters = 0;
        while iters < params.max_iters {
            iters += 1;
            let n = acc.valid as f64;
            let h = acc.h / n;
            let g = acc.g / n;
            let base = (1e-6 * h.trace() / 6.0).max(f64::MIN_POSITIVE);
            let mut lambda = 0.0;
            let mut accepted = None;
            let mut converged = false;
            for _ in 0..=MAX_DAMPING_RETRIES {
                let delta = match solve_damped(&h, &g, lambda) {
                    Some(d) => d,
                    None => {
                        lambda = if lambda == 0.0 { base } else { lambda * 10.0 };
                        match solve_damped(&h, &g, lambda) {
                            Some(d) => d,
                            None => continue,
                        }
                    }
                };
                if delta.norm() < params.tol {
                    converged = true;
                    break;
                }
                let candidate = Pose::exp(&Twist::from_vector(&delta)).compose(&pose);
                let trial = eval(&candidate, true);
                let trial_cost = trial.mean_cost();
                if trial.fraction() >= params.min_valid_fraction && trial_cost <= current_cost {
                    accepted = Some((candidate, trial, trial_cost));
                    break;
                }
                lambda = if lambda == 0.0 { base } else { lambda * 10.0 };
            }
            let Some((candidate, trial, trial_cost)) = accepted.filter(|_| !converged) else {
                break;
            };
            pose = candidate;
            acc = trial;
            current_cost = trial_cost;
        }
        iterations_per_level.push(iters);
    }

    // the pose handed back never scores worse than the initial guess at full resolution
    let final_acc = accumulate(f1.view(0), f2.view(0), &pose, k, params.stride, &params.weights, false);
    let final_cost = final_acc.mean_cost();
    if !final_cost.is_finite() {
        return Err(Error::Divergence);
    }
    let init_acc = accumulate(f1.view(0), f2.view(0), init, k, params.stride, &params.weights, false);
    if init_acc.mean_cost() < final_cost && init_acc.fraction() >= params.min_valid_fraction {
        return Ok(AlignmentResult {
            pose: *init,
            final_cost: init_acc.mean_cost(),
            iterations_per_level,
            valid_pixel_fraction: init_acc.fraction(),
        });
    }
    if final_acc.fraction() < params.min_valid_fraction {
        return Err(Error::InsufficientOverlap(final_acc.fraction()));
    }
    Ok(AlignmentResult {
        pose,
        final_cost,
        iterations_per_level,
        valid_pixel_fraction: final_acc.fraction(),
    })
}

/// Convenience wrapper: builds pyramids and masks, then aligns.
pub fn align_frames(
    frame1: &FramePair,
    frame2: &FramePair,
    mask1: Option<&AlphaMask>,
    mask2: Option<&AlphaMask>,
    k: &Intrinsics,
    init: &Pose,
    params: &AlignmentParams,
) -> Result<AlignmentResult> {
    let p1 = PreparedFrame::new(frame1, mask1, params.pyramid_levels, params.mask_dilation_px)?;
    let p2 = PreparedFrame::new(frame2, mask2, params.pyramid_levels, params.mask_dilation_px)?;
    estimate_pose(&p1, &p2, k, init, params)
}
