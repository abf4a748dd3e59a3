//! Gibbs energy `E = U + V` and its reduction to an s-t cut.
//!
//! Foreground pixels end on the source side. Cutting `s -> n` (node on the
//! sink side) pays the background cost, cutting `n -> t` pays the foreground cost.

use std::f64::consts::SQRT_2;

use nalgebra::Vector3;
use rayon::prelude::*;

use super::gmm::{best_component, Gaussian};
use super::maxflow::{min_cut, FlowGraph};
use super::{AlphaMask, Color, ColorImage, ComponentAssignment, GmmModel, Trimap, TrimapLabel};

/// Data cost of a component with zero weight.
pub const LARGE_ENERGY: f64 = 1e30;

pub(crate) fn gaussian_data_term(z: &Vector3<f64>, g: &Gaussian) -> f64 {
    if g.weight <= 0.0 {
        return LARGE_ENERGY;
    }
    -g.weight.ln() + 0.5 * g.log_det() + 0.5 * g.mahalanobis_sq(z)
}

/// `D = -log pi + 1/2 log det Sigma + 1/2 (z - mu)^T Sigma^-1 (z - mu)`.
pub fn data_term(z: &Color, alpha: u8, k: usize, theta: &GmmModel) -> f64 {
    gaussian_data_term(&Vector3::new(z[0], z[1], z[2]), &theta.mixture(alpha).components[k])
}

/// Unordered 8-connected neighbor pairs `(m, n, distance)`.
pub fn neighbor_pairs(width: usize, height: usize) -> impl Iterator<Item = (usize, usize, f64)> {
    (0..height).flat_map(move |y| {
        (0..width).flat_map(move |x| {
            let m = y * width + x;
            let right = (x + 1 < width).then(|| (m, m + 1, 1.0));
            let down = (y + 1 < height).then(|| (m, m + width, 1.0));
            let down_right = (x + 1 < width && y + 1 < height).then(|| (m, m + width + 1, SQRT_2));
            let down_left = (x > 0 && y + 1 < height).then(|| (m, m + width - 1, SQRT_2));
            [right, down, down_right, down_left].into_iter().flatten()
        })
    })
}

#[inline]
fn color_dist_sq(a: &Color, b: &Color) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// `beta = 1 / (2 <|z_m - z_n|^2>)` over the neighbor pairs; 0 for a constant image.
pub fn compute_beta(img: &ColorImage) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (m, n, _) in neighbor_pairs(img.width, img.height) {
        sum += color_dist_sq(&img.data[m], &img.data[n]);
        count += 1;
    }
    if count == 0 || sum == 0.0 {
        return 0.0;
    }
    1.0 / (2.0 * sum / count as f64)
}

#[inline]
fn pair_weight(img: &ColorImage, m: usize, n: usize, dis: f64, gamma: f64, beta: f64) -> f64 {
    gamma / dis * (-beta * color_dist_sq(&img.data[m], &img.data[n])).exp()
}

/// `V = gamma * sum over neighbor pairs of [alpha_m != alpha_n] exp(-beta |z_m - z_n|^2) / dis`.
pub fn smoothness_term(img: &ColorImage, alpha: &AlphaMask, gamma: f64, beta: f64) -> f64 {
    neighbor_pairs(img.width, img.height)
        .filter(|&(m, n, _)| alpha.data[m] != alpha.data[n])
        .map(|(m, n, dis)| pair_weight(img, m, n, dis, gamma, beta))
        .sum()
}

/// `E = sum_n D(alpha_n, k_n) + V`.
pub fn total_energy(
    img: &ColorImage,
    alpha: &AlphaMask,
    k: &ComponentAssignment,
    theta: &GmmModel,
    gamma: f64,
    beta: f64,
) -> f64 {
    let u: f64 = img
        .data
        .iter()
        .enumerate()
        .map(|(n, z)| data_term(z, alpha.data[n], k.data[n], theta))
        .sum();
    u + smoothness_term(img, alpha, gamma, beta)
}

/// Graph whose minimum cut minimizes `E` jointly over the labels and, for each
/// label, the pixel's best component under `theta`.
///
/// Hard trimap labels are enforced with a sentinel capacity exceeding the sum
/// of every finite capacity.
pub fn build_graph(img: &ColorImage, trimap: &Trimap, theta: &GmmModel, gamma: f64, beta: f64) -> FlowGraph {
    let n = img.len();
    let mut g = FlowGraph::new(n);

    let costs: Vec<(f64, f64)> = img
        .data
        .par_iter()
        .zip(trimap.labels.par_iter())
        .map(|(z, label)| match label {
            TrimapLabel::Unknown => {
                let d_bg = best_component(z, &theta.background).1;
                let d_fg = best_component(z, &theta.foreground).1;
                let m = d_bg.min(d_fg);
                (d_bg - m, d_fg - m)
            }
            _ => (0.0, 0.0),
        })
        .collect();
    for (i, (bg_cost, fg_cost)) in costs.into_iter().enumerate() {
        g.add_terminal_caps(i, bg_cost, fg_cost);
    }
    for (m, nn, dis) in neighbor_pairs(img.width, img.height) {
        let w = pair_weight(img, m, nn, dis, gamma, beta);
        if w > 0.0 {
            g.add_edge(m, nn, w, w);
        }
    }

    let large = g.total_capacity() + 1.0;
    for (i, label) in trimap.labels.iter().enumerate() {
        match label {
            TrimapLabel::DefiniteBackground => g.sink_caps[i] = large,
            TrimapLabel::DefiniteForeground => g.source_caps[i] = large,
            TrimapLabel::Unknown => {}
        }
    }
    g
}

/// Solves the cut and reads off the labeling (source side = foreground).
pub fn min_cut_labeling(g: &FlowGraph, width: usize, height: usize) -> AlphaMask {
    let cut = min_cut(g);
    AlphaMask::from_bools(width, height, &cut.source_side)
}

#[cfg(test)]
mod tests {
    use nalgebra::Matrix3;

    use super::super::Mixture;
    use super::*;

    fn single(weight: f64, mean: [f64; 3], cov: Matrix3<f64>) -> GmmModel {
        let g = Gaussian::new(weight, Vector3::from(mean), cov).unwrap();
        GmmModel {
            background: Mixture::new(vec![g.clone()]),
            foreground: Mixture::new(vec![g]),
        }
    }

    #[test]
    fn data_term_values() {
        let mu = [0.3, 0.5, 0.7];
        let theta = single(1.0, mu, Matrix3::identity());
        assert_eq!(data_term(&mu, 1, 0, &theta), 0.0);

        let theta = single(0.5, mu, Matrix3::identity() * 0.01);
        let expected = -(0.5f64).ln() + 0.5 * (1e-6f64).ln();
        let d = data_term(&mu, 1, 0, &theta);
        assert!((d - expected).abs() < 1e-12);
        assert!((d - (-6.2146)).abs() < 1e-3);

        let theta = single(1.0, mu, Matrix3::identity());
        let z = [mu[0] + 2.0, mu[1], mu[2]];
        assert!((data_term(&z, 0, 0, &theta) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_component_is_unusable() {
        let theta = single(0.0, [0.0; 3], Matrix3::identity());
        assert_eq!(data_term(&[0.0; 3], 0, 0, &theta), LARGE_ENERGY);
    }

    #[test]
    fn smoothness_values() {
        let img = ColorImage::new(2, 1, vec![[0.4; 3]; 2]).unwrap();
        let alpha = AlphaMask {
            width: 2,
            height: 1,
            data: vec![0, 1],
        };
        assert_eq!(smoothness_term(&img, &alpha, 50.0, 0.0), 50.0);
        assert_eq!(smoothness_term(&img, &AlphaMask::zeros(2, 1), 50.0, 0.3), 0.0);

        // diagonal neighbors in a 2x2 image, all other pairs agree
        let img = ColorImage::new(2, 2, vec![[0.4; 3]; 4]).unwrap();
        let alpha = AlphaMask {
            width: 2,
            height: 2,
            data: vec![1, 0, 0, 0],
        };
        let only_diag = smoothness_term(&img, &alpha, 50.0, 1.0) - 2.0 * 50.0;
        assert!((only_diag - 50.0 / SQRT_2).abs() < 1e-12);
        assert!((50.0 / SQRT_2 - 35.355).abs() < 1e-3);
    }

    #[test]
    fn beta_values() {
        let constant = ColorImage::new(3, 3, vec![[0.2; 3]; 9]).unwrap();
        assert_eq!(compute_beta(&constant), 0.0);

        let two = ColorImage::new(2, 1, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(compute_beta(&two), 0.5);

        // horizontal/vertical pairs differ, diagonal pairs agree on a checkerboard;
        // a 1-pixel-tall stripe has only axis pairs, all differing
        let a = [0.1, 0.2, 0.3];
        let b = [0.4, 0.2, 0.1];
        let stripe = ColorImage::new(5, 1, vec![a, b, a, b, a]).unwrap();
        let d2 = color_dist_sq(&a, &b);
        assert!((compute_beta(&stripe) - 1.0 / (2.0 * d2)).abs() < 1e-12);

        let (w, h) = (4usize, 3usize);
        let board: Vec<_> = (0..w * h)
            .map(|i| if (i % w + i / w) % 2 == 0 { a } else { b })
            .collect();
        let board = ColorImage::new(w, h, board).unwrap();
        let axis = ((w - 1) * h + w * (h - 1)) as f64;
        let diag = (2 * (w - 1) * (h - 1)) as f64;
        let expected = 1.0 / (2.0 * d2 * axis / (axis + diag));
        assert!((compute_beta(&board) - expected).abs() < 1e-9);
    }

    #[test]
    fn neighbor_count() {
        // 4 unordered pairs per interior pixel
        let (w, h) = (5, 4);
        let count = neighbor_pairs(w, h).count();
        let expected = (w - 1) * h + w * (h - 1) + 2 * (w - 1) * (h - 1);
        assert_eq!(count, expected);
    }

    #[test]
    fn all_background_trimap_cuts_to_background() {
        let img = ColorImage::new(3, 3, (0..9).map(|i| [i as f64 / 9.0; 3]).collect()).unwrap();
        let theta = single(1.0, [0.5; 3], Matrix3::identity());
        let trimap = Trimap::filled(3, 3, TrimapLabel::DefiniteBackground);
        let g = build_graph(&img, &trimap, &theta, 50.0, compute_beta(&img));
        assert_eq!(min_cut_labeling(&g, 3, 3).count(), 0);
        assert!(g.source_caps.iter().chain(&g.sink_caps).all(|c| *c >= 0.0));
    }

    #[test]
    fn single_unknown_pixel_follows_lower_data_cost() {
        let bg = Gaussian::new(1.0, Vector3::new(0.0, 0.0, 0.0), Matrix3::identity() * 0.01).unwrap();
        let fg = Gaussian::new(1.0, Vector3::new(1.0, 1.0, 1.0), Matrix3::identity() * 0.01).unwrap();
        let theta = GmmModel {
            background: Mixture::new(vec![bg]),
            foreground: Mixture::new(vec![fg]),
        };
        let img = ColorImage::new(1, 1, vec![[0.9, 0.9, 0.9]]).unwrap();
        let trimap = Trimap::filled(1, 1, TrimapLabel::Unknown);
        let g = build_graph(&img, &trimap, &theta, 50.0, 0.0);
        assert_eq!(min_cut_labeling(&g, 1, 1).data, vec![1]);
    }
}
