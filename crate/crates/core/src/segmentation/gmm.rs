//! Hard-assignment Gaussian mixtures over normalized RGB.
//!
//! Each pixel belongs to exactly one component of its label's mixture, so the
//! fit is a block-coordinate descent (assign / refit) rather than soft EM.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::{AlphaMask, ColorImage, ComponentAssignment};
use crate::error::{Error, Result};

const KMEANS_ITERS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub weight: f64,
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    inv_cov: Matrix3<f64>,
    log_det: f64,
}

impl Gaussian {
    pub fn new(weight: f64, mean: Vector3<f64>, cov: Matrix3<f64>) -> Result<Self> {
        let chol = cov.cholesky().ok_or_else(|| {
            Error::DegenerateTrimap(format!("covariance is not positive definite: {cov:?}"))
        })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Gaussian {
            weight,
            mean,
            cov,
            inv_cov: chol.inverse(),
            log_det,
        })
    }

    /// Placeholder for a component with no members; never selected.
    fn unused() -> Self {
        Gaussian {
            weight: 0.0,
            mean: Vector3::zeros(),
            cov: Matrix3::identity(),
            inv_cov: Matrix3::identity(),
            log_det: 0.0,
        }
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn mahalanobis_sq(&self, z: &Vector3<f64>) -> f64 {
        let d = z - self.mean;
        d.dot(&(self.inv_cov * d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub components: Vec<Gaussian>,
}

impl Mixture {
    pub fn new(components: Vec<Gaussian>) -> Self {
        Mixture { components }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// Background (`alpha = 0`) and foreground (`alpha = 1`) mixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub background: Mixture,
    pub foreground: Mixture,
}

impl GmmModel {
    pub fn mixture(&self, alpha: u8) -> &Mixture {
        if alpha == 0 {
            &self.background
        } else {
            &self.foreground
        }
    }
}

/// `1e-6` times the mean per-channel color variance of the image, floored at `1e-8`.
pub fn regularization_epsilon(img: &ColorImage) -> f64 {
    let n = img.len().max(1) as f64;
    let mut mean = [0.0; 3];
    for c in &img.data {
        for ch in 0..3 {
            mean[ch] += c[ch];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = 0.0;
    for c in &img.data {
        for ch in 0..3 {
            var += (c[ch] - mean[ch]).powi(2);
        }
    }
    let mean_var = var / (3.0 * n);
    (1e-6 * mean_var).max(1e-8)
}

fn vec3(c: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(c[0], c[1], c[2])
}

/// Closed-form group statistics: weight = group share of its label, mean,
/// covariance + `eps * I`. Empty groups get weight 0.
pub fn fit_gmm(
    img: &ColorImage,
    alpha: &AlphaMask,
    k: &ComponentAssignment,
    components: usize,
    eps: f64,
) -> Result<GmmModel> {
    let mut count = [vec![0usize; components], vec![0usize; components]];
    let mut sum = [
        vec![Vector3::<f64>::zeros(); components],
        vec![Vector3::<f64>::zeros(); components],
    ];
    for (n, c) in img.data.iter().enumerate() {
        let a = alpha.data[n].min(1) as usize;
        let kn = k.data[n];
        count[a][kn] += 1;
        sum[a][kn] += vec3(c);
    }
    let mut means = sum.clone();
    for a in 0..2 {
        for kk in 0..components {
            if count[a][kk] > 0 {
                means[a][kk] = sum[a][kk] / count[a][kk] as f64;
            }
        }
    }
    let mut scatter = [
        vec![Matrix3::<f64>::zeros(); components],
        vec![Matrix3::<f64>::zeros(); components],
    ];
    for (n, c) in img.data.iter().enumerate() {
        let a = alpha.data[n].min(1) as usize;
        let kn = k.data[n];
        let d = vec3(c) - means[a][kn];
        scatter[a][kn] += d * d.transpose();
    }

    let mut mixtures = Vec::with_capacity(2);
    for a in 0..2 {
        let population: usize = count[a].iter().sum();
        if population == 0 {
            let which = if a == 0 { "background" } else { "foreground" };
            return Err(Error::DegenerateTrimap(format!("no {which} pixels")));
        }
        let mut comps = Vec::with_capacity(components);
        for kk in 0..components {
            if count[a][kk] == 0 {
                comps.push(Gaussian::unused());
                continue;
            }
            let nk = count[a][kk] as f64;
            let mut cov = scatter[a][kk] / nk;
            // symmetrize against rounding before adding the floor
            cov = (cov + cov.transpose()) * 0.5;
            cov += Matrix3::identity() * eps;
            comps.push(Gaussian::new(nk / population as f64, means[a][kk], cov)?);
        }
        mixtures.push(Mixture::new(comps));
    }
    let foreground = mixtures.pop().unwrap();
    let background = mixtures.pop().unwrap();
    Ok(GmmModel {
        background,
        foreground,
    })
}

/// Per pixel, the component of its own label's mixture with the lowest data
/// term; ties go to the lowest index.
pub fn assign_components(img: &ColorImage, alpha: &AlphaMask, theta: &GmmModel) -> ComponentAssignment {
    let data = img
        .data
        .par_iter()
        .zip(alpha.data.par_iter())
        .map(|(c, a)| best_component(c, theta.mixture(*a)).0)
        .collect();
    ComponentAssignment {
        width: img.width,
        height: img.height,
        data,
    }
}

/// `(argmin_k D, min_k D)` over one mixture.
pub(crate) fn best_component(c: &[f64; 3], mix: &Mixture) -> (usize, f64) {
    let z = vec3(c);
    let mut best = (0, f64::INFINITY);
    for (kk, g) in mix.components.iter().enumerate() {
        let d = super::energy::gaussian_data_term(&z, g);
        if d < best.1 {
            best = (kk, d);
        }
    }
    best
}

/// Deterministic k-means seeding of the component assignment, run separately
/// for each label.
pub(crate) fn initial_assignment(
    img: &ColorImage,
    alpha: &AlphaMask,
    components: usize,
) -> ComponentAssignment {
    let mut data = vec![0usize; img.len()];
    for a in 0..2u8 {
        let members: Vec<usize> = (0..img.len()).filter(|&n| alpha.data[n].min(1) == a).collect();
        if members.is_empty() {
            continue;
        }
        let labels = kmeans(img, &members, components);
        for (m, l) in members.iter().zip(labels) {
            data[*m] = l;
        }
    }
    ComponentAssignment {
        width: img.width,
        height: img.height,
        data,
    }
}

fn kmeans(img: &ColorImage, members: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = members.to_vec();
    let brightness = |n: usize| img.data[n].iter().sum::<f64>();
    order.sort_by(|&a, &b| brightness(a).total_cmp(&brightness(b)).then(a.cmp(&b)));
    let n = order.len();
    let mut centers: Vec<[f64; 3]> = (0..k)
        .map(|i| img.data[order[((2 * i + 1) * n / (2 * k)).min(n - 1)]])
        .collect();

    let nearest = |c: &[f64; 3], centers: &[[f64; 3]]| -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, m) in centers.iter().enumerate() {
            let d = (c[0] - m[0]).powi(2) + (c[1] - m[1]).powi(2) + (c[2] - m[2]).powi(2);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    };

    let mut labels = vec![0usize; members.len()];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (slot, &m) in members.iter().enumerate() {
            let l = nearest(&img.data[m], &centers);
            changed |= l != labels[slot];
            labels[slot] = l;
        }
        let mut acc = vec![([0.0; 3], 0usize); k];
        for (slot, &m) in members.iter().enumerate() {
            let e = &mut acc[labels[slot]];
            for ch in 0..3 {
                e.0[ch] += img.data[m][ch];
            }
            e.1 += 1;
        }
        for (c, (s, cnt)) in centers.iter_mut().zip(acc) {
            if cnt > 0 {
                *c = [s[0] / cnt as f64, s[1] / cnt as f64, s[2] / cnt as f64];
            }
        }
        if !changed {
            break;
        }
    }
    labels
}
