//! 3D covariance construction, perspective splatting to screen space, and
//! the matching backward pass.
//!
//! The screen-space covariance is `J W Σ Wᵀ Jᵀ`, where `W` is the rotation part
//! of the world-to-camera transform and `J` is the Jacobian of the perspective
//! map evaluated at the camera-frame mean.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use crate::scene::{normalize_quat, Camera, Gaussian};
use crate::{Error, Result};

/// Isotropic variance added to every screen-space covariance (pixels²).
pub const COV2D_DILATION: f64 = 0.3;
/// Footprint radius in standard deviations of the dilated covariance.
pub const RADIUS_SIGMAS: f64 = 3.0;
/// Means projecting outside this multiple of the half-image (around the image center) are culled.
pub const GUARD_BAND: f64 = 1.3;

#[derive(Debug, Clone, PartialEq)]
pub struct Projected2D {
    pub mean2d: [f64; 2],
    /// Undilated screen covariance `[xx, xy, yy]`.
    pub cov2d: [f64; 3],
    /// Inverse of the dilated covariance `[a, b, c]` (b is the off-diagonal entry).
    pub conic: [f64; 3],
    pub depth: f64,
    pub radius: u32,
    pub gaussian_index: usize,
}

impl Projected2D {
    /// Conservative pixel bounding box `[x0, x1) × [y0, y1)` clipped to the image.
    /// [`Projected2D::covers`] makes the exact per-pixel decision.
    pub fn pixel_rect(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let r = self.radius as f64 + 1.0;
        let x0 = (self.mean2d[0] - r - 0.5).floor().max(0.0);
        let x1 = ((self.mean2d[0] + r - 0.5).ceil() + 1.0).min(width as f64);
        let y0 = (self.mean2d[1] - r - 0.5).floor().max(0.0);
        let y1 = ((self.mean2d[1] + r - 0.5).ceil() + 1.0).min(height as f64);
        if x0 >= x1 || y0 >= y1 {
            return None;
        }
        Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
    }

    /// Whether the splat's square footprint covers the center of pixel `(x, y)`.
    #[inline]
    pub fn covers(&self, px: f64, py: f64) -> bool {
        let r = self.radius as f64;
        (px - self.mean2d[0]).abs() <= r && (py - self.mean2d[1]).abs() <= r
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the unit quaternion.
fn quat_matrix_backward(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [dw, dx, dy, dz]
}

/// `Σ = R diag(s²) Rᵀ` from log-scales and an unnormalized quaternion.
pub fn build_cov3d(log_scale: [f64; 3], rotation: [f64; 4]) -> Result<Matrix3<f64>> {
    if log_scale.iter().chain(&rotation).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance parameters".into()));
    }
    let q = normalize_quat(rotation).ok_or_else(|| Error::NonFinite("zero quaternion".into()))?;
    let m = quat_to_matrix(q) * Matrix3::from_diagonal(&Vector3::from(log_scale.map(f64::exp)));
    Ok(m * m.transpose())
}

fn perspective_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (t.x, t.y, t.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * x * iz2, 0.0, cam.fy * iz, -cam.fy * y * iz2)
}

/// Inverse of a symmetric 2×2 `[a, b, c]`.
fn inverse_sym2(m: [f64; 3]) -> Option<[f64; 3]> {
    let det = m[0] * m[2] - m[1] * m[1];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    Some([m[2] / det, -m[1] / det, m[0] / det])
}

/// Projects one Gaussian. Returns `Ok(None)` when it is culled.
pub fn project_gaussian(g: &Gaussian, index: usize, cam: &Camera) -> Result<Option<Projected2D>> {
    let cov3 = build_cov3d(g.log_scale, g.rotation)?;
    if g.position.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("position of gaussian {index}")));
    }
    let t = cam.to_camera_frame(&g.position);
    if t.z <= cam.near || t.z >= cam.far {
        return Ok(None);
    }
    let mean2d = [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy];
    let (hw, hh) = (cam.width as f64 / 2.0, cam.height as f64 / 2.0);
    if (mean2d[0] - hw).abs() > GUARD_BAND * hw || (mean2d[1] - hh).abs() > GUARD_BAND * hh {
        return Ok(None);
    }
    let tm = perspective_jacobian(cam, &t) * cam.rotation();
    let c2 = tm * cov3 * tm.transpose();
    let cov2d = [c2[(0, 0)], 0.5 * (c2[(0, 1)] + c2[(1, 0)]), c2[(1, 1)]];
    let dilated = [cov2d[0] + COV2D_DILATION, cov2d[1], cov2d[2] + COV2D_DILATION];
    let conic = inverse_sym2(dilated)
        .ok_or_else(|| Error::Internal(format!("singular screen covariance for gaussian {index}")))?;
    let mid = 0.5 * (dilated[0] + dilated[2]);
    let half_gap = (0.25 * (dilated[0] - dilated[2]).powi(2) + dilated[1] * dilated[1]).sqrt();
    let lambda_max = mid + half_gap;
    let radius = (RADIUS_SIGMAS * lambda_max.sqrt()).ceil().max(1.0) as u32;
    Ok(Some(Projected2D { mean2d, cov2d, conic, depth: t.z, radius, gaussian_index: index }))
}

/// Ascending depth order; equal depths fall back to ascending Gaussian index.
/// Returns positions into `projected`.
pub fn cull_and_sort(projected: &[Projected2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..projected.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&projected[a], &projected[b]);
        pa.depth.total_cmp(&pb.depth).then(pa.gaussian_index.cmp(&pb.gaussian_index))
    });
    order
}

/// Gradients with respect to the raw Gaussian parameters touched by projection.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProjectionGrad {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
}

/// Backward of [`project_gaussian`] given gradients on `mean2d` and `conic`.
pub fn project_backward(
    g: &Gaussian,
    cam: &Camera,
    proj: &Projected2D,
    d_mean2d: [f64; 2],
    d_conic: [f64; 3],
) -> ProjectionGrad {
    let qn = (g.rotation.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let q = g.rotation.map(|v| v / qn);
    let rot = quat_to_matrix(q);
    let s = Vector3::from(g.log_scale.map(f64::exp));
    let m = rot * Matrix3::from_diagonal(&s);
    let cov3 = m * m.transpose();
    let w = cam.rotation();
    let t = cam.to_camera_frame(&g.position);
    let j = perspective_jacobian(cam, &t);
    let tm = j * w;

    // conic = inverse(dilated): dL/dΣ' = -Q G Q with G the symmetric gradient matrix of the conic
    let qm = nalgebra::Matrix2::new(proj.conic[0], proj.conic[1], proj.conic[1], proj.conic[2]);
    let gq = nalgebra::Matrix2::new(d_conic[0], 0.5 * d_conic[1], 0.5 * d_conic[1], d_conic[2]);
    let g_cov2 = -(qm * gq * qm);

    let g_cov3 = tm.transpose() * g_cov2 * tm;
    let g_tm = 2.0 * g_cov2 * tm * cov3;
    let g_j = g_tm * w.transpose();

    let (x, y, z) = (t.x, t.y, t.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_t = Vector3::new(
        -fx * iz2 * g_j[(0, 2)],
        -fy * iz2 * g_j[(1, 2)],
        -fx * iz2 * g_j[(0, 0)] + 2.0 * fx * x * iz3 * g_j[(0, 2)] - fy * iz2 * g_j[(1, 1)]
            + 2.0 * fy * y * iz3 * g_j[(1, 2)],
    );
    g_t.x += d_mean2d[0] * fx * iz;
    g_t.y += d_mean2d[1] * fy * iz;
    g_t.z += -d_mean2d[0] * fx * x * iz2 - d_mean2d[1] * fy * y * iz2;
    let g_p = w.transpose() * g_t;

    // Σ = M Mᵀ, M = R diag(s)
    let g_m = 2.0 * g_cov3 * m;
    let mut g_log_scale = [0.0; 3];
    let mut g_rot = Matrix3::zeros();
    for k in 0..3 {
        let mut acc = 0.0;
        for i in 0..3 {
            acc += g_m[(i, k)] * rot[(i, k)];
            g_rot[(i, k)] = g_m[(i, k)] * s[k];
        }
        g_log_scale[k] = acc * s[k];
    }
    let g_qhat = quat_matrix_backward(q, &g_rot);
    let dot: f64 = (0..4).map(|i| g_qhat[i] * q[i]).sum();
    let g_q = [0, 1, 2, 3].map(|i| (g_qhat[i] - q[i] * dot) / qn);

    ProjectionGrad { position: [g_p.x, g_p.y, g_p.z], log_scale: g_log_scale, rotation: g_q }
}
