//! False-color views of rendered identity features.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::image::Image;

/// Projects every pixel's feature onto the three leading principal components
/// (weighted by `alpha`) and rescales each component to [0, 1]. Component signs
/// are fixed so the largest-magnitude loading is positive.
pub fn feature_pca(features: &Image, alpha: &[f64]) -> Image {
    let (n, d) = (features.pixel_count(), features.channels);
    let mut out = Image::new(features.width, features.height, 3);
    let total: f64 = alpha.iter().sum();
    if n == 0 || d == 0 || total <= 0.0 {
        return out;
    }
    let mut mean = vec![0.0; d];
    for p in 0..n {
        for c in 0..d {
            mean[c] += alpha[p] * features.data[p * d + c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for p in 0..n {
        let x: Vec<f64> = (0..d).map(|c| features.data[p * d + c] - mean[c]).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += alpha[p] * x[i] * x[j];
            }
        }
    }
    let eig = SymmetricEigen::new(cov / total);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    for (k, &e) in order.iter().take(3).enumerate() {
        let mut axis: Vec<f64> = eig.eigenvectors.column(e).iter().copied().collect();
        let lead = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        let proj: Vec<f64> =
            (0..n).map(|p| (0..d).map(|c| (features.data[p * d + c] - mean[c]) * axis[c]).sum()).collect();
        let (lo, hi) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = hi - lo;
        for p in 0..n {
            out.data[p * 3 + k] = if span > 1e-12 { (proj[p] - lo) / span } else { 0.0 };
        }
    }
    out
}
