//! Training objectives: image reconstruction, 2D identity classification and
//! 3D neighborhood regularization of identity encodings.

pub mod ssim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::{Image, MaskMap};
use crate::knn::KdTree;
use crate::scene::{softmax_in_place, Classifier, Scene, IDENTITY_DIM};
use crate::{Error, Result};

pub const DEFAULT_LAMBDA_SSIM: f64 = 0.2;

/// `(1 - λ)·L1 + λ·(1 - SSIM)` and its gradient with respect to `render`.
pub fn reconstruction_loss(render: &Image, target: &Image, lambda_ssim: f64) -> Result<(f64, Image)> {
    render.check_same_shape(target, "reconstruction loss")?;
    let (l1, g1) = l1_loss(render, target, None)?;
    let (s, gs) = ssim::ssim_with_grad(render, target)?;
    let mut grad = g1;
    for (g, &d) in grad.data.iter_mut().zip(&gs.data) {
        *g = (1.0 - lambda_ssim) * *g - lambda_ssim * d;
    }
    Ok(((1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s), grad))
}

/// Mean absolute error over pixels with nonzero weight (all pixels when `weights` is `None`).
pub fn l1_loss(render: &Image, target: &Image, weights: Option<&[bool]>) -> Result<(f64, Image)> {
    render.check_same_shape(target, "l1 loss")?;
    let nc = render.channels;
    let count = match weights {
        Some(w) => {
            if w.len() != render.pixel_count() {
                return Err(Error::ShapeMismatch("l1 weight mask".into()));
            }
            w.iter().filter(|&&b| b).count() * nc
        }
        None => render.data.len(),
    };
    let mut grad = Image::new(render.width, render.height, nc);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (i, (&r, &t)) in render.data.iter().zip(&target.data).enumerate() {
        if weights.is_some_and(|w| !w[i / nc]) {
            continue;
        }
        let d = r - t;
        total += d.abs();
        grad.data[i] = if d > 0.0 {
            inv
        } else if d < 0.0 {
            -inv
        } else {
            0.0
        };
    }
    Ok((total * inv, grad))
}

/// Weights of the region-restricted fine-tuning loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionWeights {
    /// L1 on pixels outside the region.
    pub outside_l1: f64,
    /// D-SSIM on the region's bounding box.
    pub inside_dssim: f64,
    /// L1 on pixels inside the region.
    pub inside_l1: f64,
}

impl Default for RegionWeights {
    fn default() -> Self {
        RegionWeights { outside_l1: 1.0, inside_dssim: 1.0, inside_l1: 0.0 }
    }
}

/// Bounding box `(x0, y0, x1, y1)` (exclusive ends) of the set pixels.
pub fn region_bbox(region: &[bool], width: usize) -> Option<(usize, usize, usize, usize)> {
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in region.iter().enumerate().filter(|(_, &r)| r) {
        let (x, y) = (i % width, i / width);
        bbox = Some(match bbox {
            None => (x, y, x + 1, y + 1),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
        });
    }
    bbox
}

pub fn crop(img: &Image, (x0, y0, x1, y1): (usize, usize, usize, usize)) -> Image {
    let mut out = Image::new(x1 - x0, y1 - y0, img.channels);
    for y in y0..y1 {
        for x in x0..x1 {
            out.pixel_mut(x - x0, y - y0).copy_from_slice(img.pixel(x, y));
        }
    }
    out
}

/// L1 outside `region` plus D-SSIM (and optionally L1) inside it, with the gradient.
pub fn region_loss(render: &Image, target: &Image, region: &[bool], w: &RegionWeights) -> Result<(f64, Image)> {
    render.check_same_shape(target, "region loss")?;
    if region.len() != render.pixel_count() {
        return Err(Error::ShapeMismatch("region mask size".into()));
    }
    let outside: Vec<bool> = region.iter().map(|r| !r).collect();
    let (lo, go) = l1_loss(render, target, Some(&outside))?;
    let mut loss = w.outside_l1 * lo;
    let mut grad = go;
    grad.data.iter_mut().for_each(|v| *v *= w.outside_l1);
    if w.inside_l1 != 0.0 {
        let (li, gi) = l1_loss(render, target, Some(region))?;
        loss += w.inside_l1 * li;
        for (g, d) in grad.data.iter_mut().zip(&gi.data) {
            *g += w.inside_l1 * d;
        }
    }
    if let (Some(bbox), true) = (region_bbox(region, render.width), w.inside_dssim != 0.0) {
        let (s, gs) = ssim::ssim_with_grad(&crop(render, bbox), &crop(target, bbox))?;
        loss += w.inside_dssim * (1.0 - s);
        let (x0, y0, x1, y1) = bbox;
        for y in y0..y1 {
            for x in x0..x1 {
                let src = gs.pixel(x - x0, y - y0);
                for (g, d) in grad.pixel_mut(x, y).iter_mut().zip(src) {
                    *g -= w.inside_dssim * d;
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Gradient of the loss with respect to the classifier, same layout as [`Classifier`].
pub type ClassifierGrad = Classifier;

fn add_classifier_grad(acc: &mut ClassifierGrad, other: &ClassifierGrad) {
    for (a, b) in acc.weights.iter_mut().zip(&other.weights) {
        *a += b;
    }
    for (a, b) in acc.bias.iter_mut().zip(&other.bias) {
        *a += b;
    }
}

/// Accumulates `dlogits` for input `feature` into the classifier gradient and
/// returns the gradient with respect to the feature.
fn backprop_linear(
    classifier: &Classifier,
    feature: &[f64],
    dlogits: &[f64],
    grad: &mut ClassifierGrad,
) -> [f64; IDENTITY_DIM] {
    let c = classifier.classes;
    let mut d_feature = [0.0; IDENTITY_DIM];
    for d in 0..IDENTITY_DIM {
        let row = &classifier.weights[d * c..(d + 1) * c];
        let grow = &mut grad.weights[d * c..(d + 1) * c];
        let f = feature[d];
        let mut acc = 0.0;
        for ((g, &w), &dl) in grow.iter_mut().zip(row).zip(dlogits) {
            *g += f * dl;
            acc += w * dl;
        }
        d_feature[d] = acc;
    }
    for (b, &dl) in grad.bias.iter_mut().zip(dlogits) {
        *b += dl;
    }
    d_feature
}

#[derive(Debug, Clone)]
pub struct Identity2dOutput {
    pub loss: f64,
    pub d_identity: Image,
    pub d_classifier: ClassifierGrad,
    pub labeled_pixels: usize,
}

/// Mean cross-entropy of `softmax(Wᵀ E + b)` against mask ids (id `k` is class `k - 1`;
/// id 0 is ignored).
pub fn identity_2d_loss(identity: &Image, classifier: &Classifier, mask: &MaskMap) -> Result<Identity2dOutput> {
    if identity.channels != IDENTITY_DIM {
        return Err(Error::ShapeMismatch(format!("identity image has {} channels", identity.channels)));
    }
    if mask.width != identity.width || mask.height != identity.height {
        return Err(Error::ShapeMismatch("mask and identity image sizes differ".into()));
    }
    let c = classifier.classes;
    if let Some(&id) = mask.ids.iter().find(|&&id| id as usize > c) {
        return Err(Error::MaskIdOutOfRange { id, channels: c });
    }
    let labeled = mask.ids.iter().filter(|&&id| id > 0).count();
    let mut d_identity = Image::new(identity.width, identity.height, IDENTITY_DIM);
    if labeled == 0 {
        return Ok(Identity2dOutput { loss: 0.0, d_identity, d_classifier: Classifier::zeros(c), labeled_pixels: 0 });
    }
    let inv = 1.0 / labeled as f64;
    let w = identity.width;

    let rows: Vec<(f64, ClassifierGrad, Vec<f64>)> = (0..identity.height)
        .into_par_iter()
        .map(|y| {
            let mut loss = 0.0;
            let mut grad = Classifier::zeros(c);
            let mut d_row = vec![0.0; w * IDENTITY_DIM];
            let mut probs = vec![0.0; c];
            for x in 0..w {
                let id = mask.get(x, y);
                if id == 0 {
                    continue;
                }
                let label = id as usize - 1;
                let feature = identity.pixel(x, y);
                classifier.logits_into(feature, &mut probs);
                let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + probs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - probs[label];
                for p in probs.iter_mut() {
                    *p = (*p - lse).exp() * inv;
                }
                probs[label] -= inv;
                let df = backprop_linear(classifier, feature, &probs, &mut grad);
                d_row[x * IDENTITY_DIM..(x + 1) * IDENTITY_DIM].copy_from_slice(&df);
            }
            (loss, grad, d_row)
        })
        .collect();

    let mut loss = 0.0;
    let mut d_classifier = Classifier::zeros(c);
    for (y, (l, g, d_row)) in rows.into_iter().enumerate() {
        loss += l;
        add_classifier_grad(&mut d_classifier, &g);
        d_identity.data[y * w * IDENTITY_DIM..(y + 1) * w * IDENTITY_DIM].copy_from_slice(&d_row);
    }
    Ok(Identity2dOutput { loss: loss * inv, d_identity, d_classifier, labeled_pixels: labeled })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Identity3dConfig {
    /// Neighbors per sampled Gaussian.
    pub k: usize,
    /// Sampled Gaussians per evaluation.
    pub m: usize,
    /// Stride-downsample the scene to at most this many points before sampling.
    pub max_points: usize,
    /// Stop the gradient through the neighbor distributions.
    pub detach_neighbors: bool,
}

impl Default for Identity3dConfig {
    fn default() -> Self {
        Identity3dConfig { k: 5, m: 1000, max_points: 300_000, detach_neighbors: false }
    }
}

#[derive(Debug, Clone)]
pub struct Identity3dOutput {
    pub loss: f64,
    /// Gradient per Gaussian identity encoding (zero for untouched ones).
    pub d_identity: Vec<[f64; IDENTITY_DIM]>,
    pub d_classifier: ClassifierGrad,
    /// Sampled Gaussian indices, in sampling order.
    pub samples: Vec<usize>,
    /// Neighbor indices for each sample.
    pub neighbors: Vec<Vec<usize>>,
}

/// Log-softmax of the classifier output for one encoding.
fn log_probs(classifier: &Classifier, e: &[f64]) -> Vec<f64> {
    let mut z = classifier.logits(e);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in z.iter_mut() {
        *v -= lse;
    }
    z
}

/// Indices of the (stride-downsampled) point set the 3D loss works on.
pub fn downsample_indices(n: usize, max_points: usize) -> Vec<usize> {
    let stride = n.div_ceil(max_points.max(1)).max(1);
    (0..n).step_by(stride).collect()
}

/// Draws `m` sample positions (with replacement) and finds each one's `k`
/// nearest other Gaussians by position.
pub fn sample_neighborhoods(scene: &Scene, config: &Identity3dConfig, seed: u64) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    let pool = downsample_indices(scene.len(), config.max_points);
    if config.k == 0 || config.m == 0 {
        return Err(Error::InvalidConfig("3D loss needs k >= 1 and m >= 1".into()));
    }
    if config.k >= pool.len() {
        return Err(Error::NotEnoughPoints { k: config.k, points: pool.len() });
    }
    let points: Vec<[f64; 3]> = pool.iter().map(|&i| scene.gaussians[i].position).collect();
    let tree = KdTree::build(&points);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = (0..config.m).map(|_| rng.random_range(0..pool.len())).collect();
    let neighbors = picks
        .par_iter()
        .map(|&p| tree.nearest(points[p], config.k, Some(p)).into_iter().map(|n| pool[n.index]).collect())
        .collect();
    Ok((picks.into_iter().map(|p| pool[p]).collect(), neighbors))
}

/// `1/(m k) Σ_j Σ_i KL(F(e_j) ‖ F(e_i))` over sampled Gaussians `j` and their
/// `k` nearest neighbors `i`, with `F = softmax ∘ classifier`.
pub fn identity_3d_loss(
    scene: &Scene,
    classifier: &Classifier,
    config: &Identity3dConfig,
    seed: u64,
) -> Result<Identity3dOutput> {
    let (samples, neighbors) = sample_neighborhoods(scene, config, seed)?;
    let c = classifier.classes;
    let scale = 1.0 / (config.m * config.k) as f64;
    const CHUNK: usize = 32;

    type Partial = (f64, ClassifierGrad, Vec<(usize, [f64; IDENTITY_DIM])>);
    let partials: Vec<Partial> = samples
        .par_chunks(CHUNK)
        .zip(neighbors.par_chunks(CHUNK))
        .map(|(js, nbrs)| {
            let mut loss = 0.0;
            let mut grad = Classifier::zeros(c);
            let mut d_e = Vec::new();
            for (&j, nb) in js.iter().zip(nbrs) {
                let ej = &scene.gaussians[j].identity;
                let log_p = log_probs(classifier, ej);
                let p: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
                let mut d_zj = vec![0.0; c];
                for &i in nb {
                    let ei = &scene.gaussians[i].identity;
                    let log_q = log_probs(classifier, ei);
                    let kl: f64 = (0..c).map(|k| p[k] * (log_p[k] - log_q[k])).sum();
                    loss += kl;
                    for k in 0..c {
                        d_zj[k] += scale * p[k] * (log_p[k] - log_q[k] - kl);
                    }
                    if !config.detach_neighbors {
                        let d_zi: Vec<f64> = (0..c).map(|k| scale * (log_q[k].exp() - p[k])).collect();
                        d_e.push((i, backprop_linear(classifier, ei, &d_zi, &mut grad)));
                    }
                }
                d_e.push((j, backprop_linear(classifier, ej, &d_zj, &mut grad)));
            }
            (loss, grad, d_e)
        })
        .collect();

    let mut loss = 0.0;
    let mut d_classifier = Classifier::zeros(c);
    let mut d_identity = vec![[0.0; IDENTITY_DIM]; scene.len()];
    for (l, g, d_e) in partials {
        loss += l;
        add_classifier_grad(&mut d_classifier, &g);
        for (i, d) in d_e {
            for k in 0..IDENTITY_DIM {
                d_identity[i][k] += d[k];
            }
        }
    }
    Ok(Identity3dOutput { loss: loss * scale, d_identity, d_classifier, samples, neighbors })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_2d: f64,
    pub l_3d: f64,
    pub total: f64,
    pub lambda_2d: f64,
    pub lambda_3d: f64,
}

pub const DEFAULT_LAMBDA_2D: f64 = 1.0;
pub const DEFAULT_LAMBDA_3D: f64 = 2.0;

pub fn total_loss(l_rec: f64, l_2d: f64, l_3d: f64, lambda_2d: f64, lambda_3d: f64) -> LossReport {
    LossReport { l_rec, l_2d, l_3d, total: l_rec + lambda_2d * l_2d + lambda_3d * l_3d, lambda_2d, lambda_3d }
}

/// Class probabilities of one encoding.
pub fn probabilities(classifier: &Classifier, e: &[f64]) -> Vec<f64> {
    let mut z = classifier.logits(e);
    softmax_in_place(&mut z);
    z
}
