//! Central finite-difference checks of the rasterizer's analytic gradients.
//!
//! The scalar under test is a fixed random linear functional of the rendered
//! color and identity images. Coordinates whose ±h perturbation changes any
//! discrete branch of the forward pass (alpha skip/clamp, early stop, footprint
//! radius, culling, color clamp) are excluded, since the function is not
//! differentiable across those boundaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::image::Image;
use crate::rasterizer::{render_backward, render_forward, GaussianGrad, RenderConfig};
use crate::scene::{Camera, Gaussian, Scene, IDENTITY_DIM};
use crate::sh;
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { step: 1e-4, rel: 1e-4, abs: 1e-7 }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let err = (analytic - numeric).abs();
        err < self.abs || err < self.rel * analytic.abs().max(numeric.abs())
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GroupReport {
    pub group: &'static str,
    pub checked: usize,
    pub passed: usize,
    pub excluded: usize,
    pub worst_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed == g.checked)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn excluded(&self) -> usize {
        self.groups.iter().map(|g| g.excluded).sum()
    }

    pub fn failed(&self) -> usize {
        self.groups.iter().map(|g| g.checked - g.passed).sum()
    }
}

pub const GROUPS: [&str; 6] = ["position", "log_scale", "rotation", "opacity", "sh", "identity"];

/// Mutable access to parameter coordinate `k` of group `group`.
fn coord_mut(g: &mut Gaussian, group: usize, k: usize) -> Option<&mut f64> {
    match group {
        0 => g.position.get_mut(k),
        1 => g.log_scale.get_mut(k),
        2 => g.rotation.get_mut(k),
        3 => (k == 0).then_some(&mut g.opacity_logit),
        4 => g.sh.get_mut(k / 3).map(|c| &mut c[k % 3]),
        5 => g.identity.get_mut(k),
        _ => None,
    }
}

fn coord(grad: &GaussianGrad, group: usize, k: usize) -> f64 {
    match group {
        0 => grad.position[k],
        1 => grad.log_scale[k],
        2 => grad.rotation[k],
        3 => grad.opacity_logit,
        4 => grad.sh[k / 3][k % 3],
        _ => grad.identity[k],
    }
}

fn group_len(group: usize, sh_degree: usize) -> usize {
    [3, 3, 4, 1, 3 * sh::coeff_count(sh_degree), IDENTITY_DIM][group]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks every parameter of every Gaussian in `scene` against central differences.
pub fn check_render_gradients(
    scene: &Scene,
    cam: &Camera,
    background: [f64; 3],
    seed: u64,
    tol: Tolerance,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cam.width, cam.height);
    let wc: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let we: Vec<f64> = (0..w * h * IDENTITY_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    let config = RenderConfig { background, trace_branches: true };

    let eval = |s: &Scene| -> Result<(f64, u64)> {
        let out = render_forward(s, cam, &config)?;
        Ok((dot(&out.color.data, &wc) + dot(&out.identity.data, &we), out.branch_signature.unwrap()))
    };

    let base = render_forward(scene, cam, &config)?;
    let base_sig = base.branch_signature.unwrap();
    let d_color = Image::from_data(w, h, 3, wc.clone())?;
    let d_ident = Image::from_data(w, h, IDENTITY_DIM, we.clone())?;
    let grads = render_backward(scene, cam, &base, &d_color, Some(&d_ident))?;

    let mut groups: Vec<GroupReport> =
        GROUPS.iter().map(|&group| GroupReport { group, ..Default::default() }).collect();
    let mut probe = scene.clone();
    for i in 0..scene.len() {
        for (gi, report) in groups.iter_mut().enumerate() {
            for k in 0..group_len(gi, scene.sh_degree) {
                let orig = *coord_mut(&mut probe.gaussians[i], gi, k).unwrap();
                *coord_mut(&mut probe.gaussians[i], gi, k).unwrap() = orig + tol.step;
                let (lp, sp) = eval(&probe)?;
                *coord_mut(&mut probe.gaussians[i], gi, k).unwrap() = orig - tol.step;
                let (lm, sm) = eval(&probe)?;
                *coord_mut(&mut probe.gaussians[i], gi, k).unwrap() = orig;
                if sp != base_sig || sm != base_sig {
                    report.excluded += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * tol.step);
                let analytic = coord(&grads.gaussians[i], gi, k);
                report.checked += 1;
                let scale = analytic.abs().max(numeric.abs());
                if scale > 0.0 && (analytic - numeric).abs() >= tol.abs {
                    report.worst_rel_error = report.worst_rel_error.max((analytic - numeric).abs() / scale);
                }
                if tol.accepts(analytic, numeric) {
                    report.passed += 1;
                }
            }
        }
    }
    Ok(GradCheckReport { groups })
}

/// A small random scene in front of a `size × size` camera, for gradient checks.
pub fn random_check_scene(n: usize, sh_degree: usize, size: usize, seed: u64) -> Result<(Scene, Camera)> {
    use crate::scene::{seed_gaussian, Classifier, InitConfig, SceneMetadata};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = InitConfig { sh_degree, ..InitConfig::default() };
    let gaussians = (0..n)
        .map(|_| {
            let p = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(3.0..5.0)];
            let rgb = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
            let mut g = seed_gaussian(p, rgb, 0.1, &cfg, &mut rng);
            g.log_scale = [0; 3].map(|_| rng.random_range(-2.6..-1.6));
            g.rotation = [0; 4].map(|_| rng.random_range(-1.0..1.0));
            g.opacity_logit = rng.random_range(-1.5..2.5);
            for c in g.sh.iter_mut().skip(1) {
                *c = [0; 3].map(|_| rng.random_range(-0.15..0.15));
            }
            for e in g.identity.iter_mut() {
                *e = rng.random_range(-1.0..1.0);
            }
            g
        })
        .collect();
    let scene = Scene { gaussians, classifier: Classifier::zeros(4), sh_degree, metadata: SceneMetadata::default() };
    let cam = Camera::look_at([0.3, -0.2, -0.5], [0.0, 0.0, 4.0], [0.0, -1.0, 0.0], size, size, size as f64 * 1.4)?;
    Ok((scene, cam))
}
