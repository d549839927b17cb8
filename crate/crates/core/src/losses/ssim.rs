//! Gaussian-window SSIM (11×11, σ = 1.5) with an analytic gradient.
//!
//! Local statistics use same-size zero-padded filtering; the score is averaged
//! over pixels and channels.

use crate::image::Image;
use crate::Result;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut k = [0.0; WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable same-size filtering of one plane with zero padding.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.chunks_exact(img.channels).map(|p| p[c]).collect()
}

/// Mean SSIM of `a` against `b`.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// Mean SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.unwrap()))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.check_same_shape(b, "ssim inputs")?;
    let (w, h, nc) = (a.width, a.height, a.channels);
    let k = kernel();
    let n = (w * h * nc) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, nc));
    for c in 0..nc {
        let x = plane(a, c);
        let y = plane(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = blur(&x, w, h, &k);
        let mu_y = blur(&y, w, h, &k);
        let e_xx = blur(&xx, w, h, &k);
        let e_yy = blur(&yy, w, h, &k);
        let e_xy = blur(&xy, w, h, &k);
        let mut g_mu = vec![0.0; w * h];
        let mut g_xx = vec![0.0; w * h];
        let mut g_xy = vec![0.0; w * h];
        for p in 0..w * h {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let sxx = e_xx[p] - mx * mx;
            let syy = e_yy[p] - my * my;
            let sxy = e_xy[p] - mx * my;
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = sxx + syy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let inv = 1.0 / (b1 * b2);
                // ∂S/∂A1 = A2/(B1B2), ∂S/∂A2 = A1/(B1B2), ∂S/∂B1 = -S/B1, ∂S/∂B2 = -S/B2
                let s_a1 = a2 * inv;
                let s_a2 = a1 * inv;
                g_mu[p] = (2.0 * my * s_a1 - 2.0 * my * s_a2 - 2.0 * mx * s / b1 + 2.0 * mx * s / b2) / n;
                g_xx[p] = -s / b2 / n;
                g_xy[p] = 2.0 * s_a2 / n;
            }
        }
        if let Some(g) = grad.as_mut() {
            // the kernel is symmetric, so the adjoint of the blur is the blur itself
            let b_mu = blur(&g_mu, w, h, &k);
            let b_xx = blur(&g_xx, w, h, &k);
            let b_xy = blur(&g_xy, w, h, &k);
            for p in 0..w * h {
                g.data[p * nc + c] = b_mu[p] + 2.0 * x[p] * b_xx[p] + y[p] * b_xy[p];
            }
        }
    }
    Ok((total / n, grad))
}
