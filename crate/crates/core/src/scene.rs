//! Gaussian, classifier, scene and camera data model.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::knn;
use crate::sh;
use crate::{Error, Result};

/// Length of the per-Gaussian identity encoding.
pub const IDENTITY_DIM: usize = 16;

/// Default classifier output width.
pub const DEFAULT_CLASSES: usize = 256;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One splat. Parameters are stored pre-activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    /// `(w, x, y, z)`, normalized on use.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// `(deg + 1)²` RGB coefficient triplets.
    pub sh: Vec<[f64; 3]>,
    pub identity: [f64; IDENTITY_DIM],
}

/// Activated Gaussian parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activated {
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity: f64,
}

impl Gaussian {
    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
            && self.identity.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn activated(&self) -> Result<Activated> {
        if !self.is_finite() {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        let rotation = normalize_quat(self.rotation)
            .ok_or_else(|| Error::NonFinite("zero-norm rotation quaternion".into()))?;
        Ok(Activated { scale: self.scale(), rotation, opacity: self.opacity() })
    }

    /// Inverse of [`Gaussian::activated`] for the scale, rotation and opacity fields.
    pub fn set_activated(&mut self, a: &Activated) {
        self.log_scale = a.scale.map(f64::ln);
        self.rotation = a.rotation;
        self.opacity_logit = logit(a.opacity);
    }

    pub fn max_scale(&self) -> f64 {
        self.log_scale.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp()
    }
}

pub fn normalize_quat(q: [f64; 4]) -> Option<[f64; 4]> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n > 0.0 && n.is_finite() {
        Some(q.map(|v| v / n))
    } else {
        None
    }
}

/// Linear layer `logits = Wᵀ e + b` shared by 2D and 3D identity losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    /// Row-major `IDENTITY_DIM × classes`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
}

impl Classifier {
    pub fn zeros(classes: usize) -> Self {
        Classifier { weights: vec![0.0; IDENTITY_DIM * classes], bias: vec![0.0; classes], classes }
    }

    pub fn random(classes: usize, rng: &mut impl rand::Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (IDENTITY_DIM as f64).sqrt()).unwrap();
        let weights = (0..IDENTITY_DIM * classes).map(|_| normal.sample(rng)).collect();
        Classifier { weights, bias: vec![0.0; classes], classes }
    }

    #[inline]
    pub fn weight(&self, d: usize, c: usize) -> f64 {
        self.weights[d * self.classes + c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != IDENTITY_DIM * self.classes || self.bias.len() != self.classes {
            return Err(Error::ShapeMismatch("classifier weight/bias sizes".into()));
        }
        if !self.weights.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("classifier".into()));
        }
        Ok(())
    }

    /// Writes the logits for `feature` into `out` (length `classes`).
    pub fn logits_into(&self, feature: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (d, &f) in feature.iter().enumerate().take(IDENTITY_DIM) {
            if f == 0.0 {
                continue;
            }
            let row = &self.weights[d * self.classes..(d + 1) * self.classes];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * f;
            }
        }
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.classes];
        self.logits_into(feature, &mut out);
        out
    }

    pub fn probabilities(&self, feature: &[f64]) -> Vec<f64> {
        let mut p = self.logits(feature);
        softmax_in_place(&mut p);
        p
    }
}

/// Numerically stable softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneMetadata {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian>,
    pub classifier: Classifier,
    pub sh_degree: usize,
    pub metadata: SceneMetadata,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.gaussians.iter().map(|g| g.position).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::InvalidConfig(format!("sh degree {} above 3", self.sh_degree)));
        }
        let n = sh::coeff_count(self.sh_degree);
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.sh.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "gaussian {i} has {} sh coefficients, expected {n}",
                    g.sh.len()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gaussian {i}")));
            }
        }
        self.classifier.validate()
    }

    /// Subset of the scene keeping the listed Gaussians in order.
    pub fn select(&self, keep: impl IntoIterator<Item = usize>) -> Scene {
        Scene {
            gaussians: keep.into_iter().map(|i| self.gaussians[i].clone()).collect(),
            classifier: self.classifier.clone(),
            sh_degree: self.sh_degree,
            metadata: self.metadata.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub sh_degree: usize,
    pub classes: usize,
    pub initial_opacity: f64,
    pub identity_std: f64,
    /// Neighbors used for the isotropic scale estimate.
    pub scale_neighbors: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            sh_degree: 3,
            classes: DEFAULT_CLASSES,
            initial_opacity: 0.1,
            identity_std: 0.01,
            scale_neighbors: 3,
        }
    }
}

/// A new Gaussian at `position` with the given color, default opacity and an
/// isotropic standard deviation of `scale`.
pub fn seed_gaussian(
    position: [f64; 3],
    rgb: [f64; 3],
    scale: f64,
    config: &InitConfig,
    rng: &mut impl rand::Rng,
) -> Gaussian {
    let mut sh = vec![[0.0; 3]; sh::coeff_count(config.sh_degree)];
    sh[0] = rgb.map(sh::rgb_to_dc);
    let normal = Normal::new(0.0, config.identity_std).unwrap();
    let mut identity = [0.0; IDENTITY_DIM];
    for v in identity.iter_mut() {
        *v = normal.sample(rng);
    }
    Gaussian {
        position,
        log_scale: [scale.ln(); 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity_logit: logit(config.initial_opacity),
        sh,
        identity,
    }
}

/// Isotropic scale estimates from mean distance to nearest neighbors, with a
/// floor so duplicate points do not produce zero-size Gaussians.
pub fn neighbor_scales(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    let dists = knn::mean_neighbor_distance(points, k);
    let positive: Vec<f64> = dists.iter().flatten().copied().filter(|d| *d > 0.0).collect();
    let fallback = if positive.is_empty() {
        1.0
    } else {
        positive.iter().sum::<f64>() / positive.len() as f64
    };
    dists
        .into_iter()
        .map(|d| match d {
            Some(d) if d > 1e-7 => d,
            Some(_) => (fallback * 1e-3).max(1e-7),
            None => fallback,
        })
        .collect()
}

/// Builds a scene with one Gaussian per input point.
pub fn init_scene(points: &[([f64; 3], [f64; 3])], config: &InitConfig, seed: u64) -> Result<Scene> {
    if points.is_empty() {
        return Err(Error::EmptyInitialization);
    }
    if config.sh_degree > sh::MAX_SH_DEGREE {
        return Err(Error::InvalidConfig(format!("sh degree {} above 3", config.sh_degree)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<[f64; 3]> = points.iter().map(|p| p.0).collect();
    if positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial point positions".into()));
    }
    let scales = neighbor_scales(&positions, config.scale_neighbors);
    let gaussians = points
        .iter()
        .zip(&scales)
        .map(|(&(p, rgb), &s)| seed_gaussian(p, rgb, s, config, &mut rng))
        .collect();
    let classifier = Classifier::random(config.classes, &mut rng);
    Ok(Scene {
        gaussians,
        classifier,
        sh_degree: config.sh_degree,
        metadata: SceneMetadata { seed: Some(seed), source: "init".into(), iterations: 0 },
    })
}

/// Pinhole camera with an OpenCV-style frame (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Matrix4<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        let cam = Camera { width, height, fx, fy, cx, cy, world_to_camera, near: 0.01, far: 1000.0 };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: usize,
        height: usize,
        focal: f64,
    ) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let right = forward.cross(&Vector3::from(up)).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera::new(width, height, focal, focal, width as f64 / 2.0, height as f64 / 2.0, m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::ZeroSizeImage);
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidCamera("need 0 < near < far".into()));
        }
        if self.world_to_camera.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite pose".into()));
        }
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::InvalidCamera(format!("rotation not orthonormal (error {err:.2e})")));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera_frame(&self, p: &[f64; 3]) -> Vector3<f64> {
        self.rotation() * Vector3::from(*p) + self.translation()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_point() -> Vec<([f64; 3], [f64; 3])> {
        vec![([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])]
    }

    #[test]
    fn single_point_init() {
        let scene = init_scene(&one_point(), &InitConfig::default(), 7).unwrap();
        assert_eq!(scene.len(), 1);
        let g = &scene.gaussians[0];
        assert_eq!(g.position, [0.0, 0.0, 0.0]);
        assert!((g.opacity() - 0.1).abs() < 1e-15);
        assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.sh.len(), 16);
        assert!((sh::dc_to_rgb(g.sh[0][0]) - 1.0).abs() < 1e-12);
        assert!(g.sh[1..].iter().flatten().all(|&v| v == 0.0));
        assert_eq!(scene.classifier.classes, 256);
        assert!(scene.classifier.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn empty_init_fails() {
        let err = init_scene(&[], &InitConfig::default(), 0).unwrap_err();
        assert_eq!(err.to_string(), "empty initialization");
    }

    #[test]
    fn init_is_deterministic() {
        let pts: Vec<_> = (0..30).map(|i| ([i as f64 * 0.1, (i * i % 7) as f64, 0.5], [0.5; 3])).collect();
        let a = init_scene(&pts, &InitConfig::default(), 3).unwrap();
        let b = init_scene(&pts, &InitConfig::default(), 3).unwrap();
        assert_eq!(a, b);
        let c = init_scene(&pts, &InitConfig::default(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_init_statistics() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<_> = (0..100)
            .map(|_| ([rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()], [rng.random(); 3]))
            .collect();
        let scene = init_scene(&pts, &InitConfig::default(), 5).unwrap();
        scene.validate().unwrap();
        for g in &scene.gaussians {
            let a = g.activated().unwrap();
            assert!(a.scale.iter().all(|s| s.is_finite() && *s > 0.0));
            assert!(a.opacity > 0.0 && a.opacity < 1.0);
            let qn: f64 = a.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((qn - 1.0).abs() < 1e-9);
        }
        // Norm of a 16-dim N(0, σ²) vector: E ≈ σ·√(16 − 1/2), sd ≈ σ/√2.
        // The sample mean over n=100 has sd σ/√(2n); use a 3σ band around σ·√16.
        let sigma = 0.01;
        let n = scene.len() as f64;
        let mean_norm = scene
            .gaussians
            .iter()
            .map(|g| g.identity.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / n;
        let expected = sigma * 15.5f64.sqrt();
        let band = 3.0 * sigma / (2.0 * n).sqrt();
        assert!((mean_norm - expected).abs() < band, "mean norm {mean_norm}, expected {expected} ± {band}");
        assert!((mean_norm - sigma * 16f64.sqrt()).abs() < band);
    }

    #[test]
    fn activation_examples() {
        let mut g = init_scene(&one_point(), &InitConfig::default(), 0).unwrap().gaussians[0].clone();
        g.log_scale = [0.0; 3];
        g.opacity_logit = 0.0;
        g.rotation = [2.0, 0.0, 0.0, 0.0];
        let a = g.activated().unwrap();
        assert_eq!(a.scale, [1.0, 1.0, 1.0]);
        assert_eq!(a.opacity, 0.5);
        assert_eq!(a.rotation, [1.0, 0.0, 0.0, 0.0]);
        g.position[1] = f64::NAN;
        assert!(g.activated().is_err());
    }

    #[test]
    fn activation_inverse_round_trip() {
        let mut g = init_scene(&one_point(), &InitConfig::default(), 0).unwrap().gaussians[0].clone();
        let q = normalize_quat([0.3, -0.2, 0.9, 0.1]).unwrap();
        let a = Activated { scale: [0.02, 1.5, 3.0], rotation: q, opacity: 0.73 };
        g.set_activated(&a);
        let b = g.activated().unwrap();
        for i in 0..3 {
            assert!((a.scale[i] - b.scale[i]).abs() < 1e-12);
        }
        for i in 0..4 {
            assert!((a.rotation[i] - b.rotation[i]).abs() < 1e-12);
        }
        assert!((a.opacity - b.opacity).abs() < 1e-12);
    }

    #[test]
    fn camera_validation() {
        let cam = Camera::look_at([0.0, -5.0, 2.0], [0.0; 3], [0.0, 0.0, 1.0], 32, 24, 30.0).unwrap();
        let c = cam.center();
        assert!((c - Vector3::new(0.0, -5.0, 2.0)).norm() < 1e-12);
        // target projects to the principal point
        let t = cam.to_camera_frame(&[0.0, 0.0, 0.0]);
        assert!(t.x.abs() < 1e-12 && t.y.abs() < 1e-12 && t.z > 0.0);
        let mut bad = cam.clone();
        bad.fx = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = cam.clone();
        bad.world_to_camera[(0, 0)] = 2.0;
        assert!(bad.validate().is_err());
        let mut bad = cam;
        bad.near = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn argmax_tiebreak() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }
}
