use log::warn;
use rayon::prelude::*;

use super::gmm::initial_assignment;
use super::{
    apply_strokes, assign_components, build_graph, compute_beta, fit_gmm, init_trimap,
    min_cut_labeling, regularization_epsilon, total_energy, AlphaMask, ColorImage, Stroke,
    Trimap, TrimapLabel,
};
use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrabcutParams {
    /// Components per mixture.
    pub components: usize,
    pub gamma: f64,
    pub max_iters: usize,
    /// Stop once the relative energy decrease falls below this.
    pub tol: f64,
}

impl Default for GrabcutParams {
    fn default() -> Self {
        GrabcutParams {
            components: 5,
            gamma: 50.0,
            max_iters: 10,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrabcutOutcome {
    pub mask: AlphaMask,
    /// Energy after initialization, then after every iteration.
    pub energy_trace: Vec<f64>,
    pub iterations: usize,
    /// Set when a cut left one label without pixels; the mask is returned as is.
    pub collapsed: bool,
}

fn initial_alpha(trimap: &Trimap) -> AlphaMask {
    AlphaMask {
        width: trimap.width,
        height: trimap.height,
        data: trimap
            .labels
            .iter()
            .map(|l| (*l != TrimapLabel::DefiniteBackground) as u8)
            .collect(),
    }
}

/// Iterated graph-cut segmentation.
///
/// Each iteration reassigns components, refits both mixtures, and solves one
/// min cut. A refit that would raise the energy is discarded, so the trace
/// never increases.
pub fn grabcut(img: &ColorImage, trimap: &Trimap, params: &GrabcutParams) -> Result<GrabcutOutcome> {
    if (img.width, img.height) != (trimap.width, trimap.height) {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs trimap {}x{}",
            img.width, img.height, trimap.width, trimap.height
        )));
    }
    if params.components == 0 {
        return Err(Error::Config("gmm_components must be at least 1".into()));
    }
    if trimap.count(TrimapLabel::Unknown) == 0 {
        return Err(Error::DegenerateTrimap("no unknown pixels".into()));
    }
    let mut alpha = initial_alpha(trimap);
    let fg = alpha.count();
    if fg == 0 || fg == alpha.data.len() {
        return Err(Error::DegenerateTrimap(
            "initial labeling has an empty class".into(),
        ));
    }
    if params.max_iters == 0 {
        return Ok(GrabcutOutcome {
            mask: alpha,
            energy_trace: Vec::new(),
            iterations: 0,
            collapsed: false,
        });
    }

    let beta = compute_beta(img);
    let eps = regularization_epsilon(img);
    let (gamma, kc) = (params.gamma, params.components);

    let seed = initial_assignment(img, &alpha, kc);
    let mut theta = fit_gmm(img, &alpha, &seed, kc, eps)?;
    let k = assign_components(img, &alpha, &theta);
    let mut energy = total_energy(img, &alpha, &k, &theta, gamma, beta);
    let mut trace = vec![energy];
    let mut iterations = 0;
    let mut collapsed = false;

    for _ in 0..params.max_iters {
        let k = assign_components(img, &alpha, &theta);
        let refit = fit_gmm(img, &alpha, &k, kc, eps)?;
        if total_energy(img, &alpha, &k, &refit, gamma, beta)
            <= total_energy(img, &alpha, &k, &theta, gamma, beta)
        {
            theta = refit;
        }

        let graph = build_graph(img, trimap, &theta, gamma, beta);
        alpha = min_cut_labeling(&graph, img.width, img.height);
        let k = assign_components(img, &alpha, &theta);
        let next = total_energy(img, &alpha, &k, &theta, gamma, beta);
        trace.push(next);
        iterations += 1;

        let fg = alpha.count();
        if fg == 0 || fg == alpha.data.len() {
            warn!("grabcut collapsed to a single label after {iterations} iteration(s)");
            collapsed = true;
            break;
        }
        let decrease = (energy - next) / energy.abs().max(f64::MIN_POSITIVE);
        energy = next;
        if decrease < params.tol {
            break;
        }
    }

    Ok(GrabcutOutcome {
        mask: alpha,
        energy_trace: trace,
        iterations,
        collapsed,
    })
}

/// Segments every box independently and ORs the resulting masks.
///
/// Strokes, when given, are applied on top of each box's trimap.
pub fn segment_boxes(
    rgb: &RgbImage,
    boxes: &[BBox],
    strokes: &[Stroke],
    params: &GrabcutParams,
) -> Result<(AlphaMask, Vec<GrabcutOutcome>)> {
    let img = ColorImage::from_rgb(rgb);
    let outcomes: Vec<GrabcutOutcome> = boxes
        .par_iter()
        .map(|b| {
            let trimap = apply_strokes(&init_trimap(b, rgb.width, rgb.height)?, strokes);
            grabcut(&img, &trimap, params)
        })
        .collect::<Result<_>>()?;
    let mut mask = AlphaMask::zeros(rgb.width, rgb.height);
    for o in &outcomes {
        mask.union_with(&o.mask);
    }
    Ok((mask, outcomes))
}
