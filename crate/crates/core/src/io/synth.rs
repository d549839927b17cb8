//! Synthetic ground truth: scenes of well-separated Gaussian blobs, rendered
//! from a camera ring, with exact instance masks and per-Gaussian group ids.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::image::{Image, MaskMap};
use crate::rasterizer::{render_forward, RenderConfig};
use crate::scene::{argmax, logit, normalize_quat, Camera, Classifier, Gaussian, Scene, SceneMetadata, IDENTITY_DIM};
use crate::sh;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

use super::dataset::{save_dataset, write_mask};
use super::ply::{save_points, save_scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlobShape {
    /// Gaussian centers uniform in a ball.
    Ball { radius: f64 },
    /// Gaussian centers uniform in a spherical shell.
    Shell { inner: f64, outer: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub center: [f64; 3],
    pub shape: BlobShape,
    pub color: [f64; 3],
    pub count: usize,
    /// Standard deviation of each Gaussian.
    pub gaussian_scale: f64,
    /// Per-Gaussian color jitter amplitude.
    #[serde(default)]
    pub color_jitter: f64,
    /// Make the blob symmetric under `x → 2·center.x − x`.
    #[serde(default)]
    pub mirror_x: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub blobs: Vec<BlobSpec>,
    pub sh_degree: usize,
    pub opacity: f64,
    pub train_views: usize,
    pub test_views: usize,
    /// Horizontal radius of the camera ring.
    pub ring_radius: f64,
    /// Height of the ring above the blobs (world `-y` is up).
    pub ring_height: f64,
    pub image_size: usize,
    pub focal: f64,
    pub background: [f64; 3],
    /// Noise of the initialization point cloud around each Gaussian center, relative to its scale.
    pub point_noise: f64,
}

pub const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.7, 0.3],
    [0.25, 0.35, 0.9],
    [0.9, 0.8, 0.2],
    [0.7, 0.3, 0.8],
    [0.2, 0.8, 0.85],
    [0.95, 0.55, 0.15],
    [0.1, 0.1, 0.1],
];

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::ring_of_blobs(3)
    }
}

impl SynthSpec {
    /// `n` ball blobs evenly spaced on a horizontal circle.
    pub fn ring_of_blobs(n: usize) -> Self {
        let layout = if n <= 1 { 0.0 } else { 0.8 };
        let blobs = (0..n)
            .map(|b| {
                let a = b as f64 / n.max(1) as f64 * std::f64::consts::TAU + 0.3;
                BlobSpec {
                    center: [layout * a.cos(), 0.0, layout * a.sin()],
                    shape: BlobShape::Ball { radius: 0.3 },
                    color: PALETTE[b % PALETTE.len()],
                    count: 150,
                    gaussian_scale: 0.09,
                    color_jitter: 0.05,
                    mirror_x: false,
                }
            })
            .collect();
        SynthSpec {
            blobs,
            sh_degree: 3,
            opacity: 0.95,
            train_views: 12,
            test_views: 4,
            ring_radius: 3.0,
            ring_height: 1.0,
            image_size: 64,
            focal: 70.0,
            background: [0.5; 3],
            point_noise: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blobs.is_empty() || self.blobs.len() > IDENTITY_DIM {
            return Err(Error::InvalidConfig(format!("need 1..=16 blobs, got {}", self.blobs.len())));
        }
        if self.blobs.iter().any(|b| b.count == 0 || !(b.gaussian_scale > 0.0)) {
            return Err(Error::InvalidConfig("every blob needs Gaussians with positive scale".into()));
        }
        if self.image_size == 0 || self.train_views + self.test_views == 0 {
            return Err(Error::InvalidConfig("need a nonzero image size and at least one view".into()));
        }
        if self.sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::InvalidConfig("sh degree above 3".into()));
        }
        Ok(())
    }

    /// Training cameras at 360°/n steps; test cameras offset by 15° plus multiples of 360°/m.
    pub fn cameras(&self) -> Result<(Vec<Camera>, Vec<Camera>)> {
        let ring = |deg: f64| {
            let a = deg.to_radians();
            Camera::look_at(
                [self.ring_radius * a.cos(), -self.ring_height, self.ring_radius * a.sin()],
                [0.0; 3],
                [0.0, -1.0, 0.0],
                self.image_size,
                self.image_size,
                self.focal,
            )
        };
        let train = (0..self.train_views)
            .map(|i| ring(360.0 * i as f64 / self.train_views as f64))
            .collect::<Result<_>>()?;
        let test = (0..self.test_views)
            .map(|i| ring(15.0 + 360.0 * i as f64 / self.test_views as f64))
            .collect::<Result<_>>()?;
        Ok((train, test))
    }
}

#[derive(Debug, Clone)]
pub struct SynthViews {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub masks: Vec<MaskMap>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub scene: Scene,
    /// Generating blob per Gaussian, 1-based (equal to its mask id).
    pub groups: Vec<u32>,
    pub train: SynthViews,
    pub test: SynthViews,
    /// Noisy colored points for initialization.
    pub points: Vec<([f64; 3], [f64; 3])>,
}

/// Identity encoding of the ground-truth scene for blob `b` (0-based).
pub fn blob_identity(b: usize) -> [f64; IDENTITY_DIM] {
    let mut e = [0.0; IDENTITY_DIM];
    e[b] = 5.0;
    e
}

fn sample_center(shape: BlobShape, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let u: f64 = rng.random();
    let (lo, hi) = match shape {
        BlobShape::Ball { radius } => (0.0, radius),
        BlobShape::Shell { inner, outer } => (inner, outer),
    };
    // Uniform in volume between the two radii.
    let r = (lo.powi(3) + u * (hi.powi(3) - lo.powi(3))).cbrt();
    dir.map(|d| d * r)
}

fn blob_gaussians(blob: &BlobSpec, index: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    let mut out = Vec::with_capacity(blob.count);
    let make = |offset: [f64; 3], rng: &mut ChaCha8Rng| {
        let q: [f64; 4] = [0; 4].map(|_| StandardNormal.sample(rng));
        let rotation = normalize_quat(q).unwrap_or([1.0, 0.0, 0.0, 0.0]);
        let log_scale = [0; 3].map(|_| blob.gaussian_scale.ln() + rng.random_range(-0.3..0.3));
        let rgb = blob.color.map(|c| (c + rng.random_range(-1.0..=1.0) * blob.color_jitter).clamp(0.0, 1.0));
        let mut sh_coeffs = vec![[0.0; 3]; sh::coeff_count(spec.sh_degree)];
        sh_coeffs[0] = rgb.map(sh::rgb_to_dc);
        Gaussian {
            position: [0, 1, 2].map(|k| blob.center[k] + offset[k]),
            log_scale,
            rotation,
            opacity_logit: logit(spec.opacity),
            sh: sh_coeffs,
            identity: blob_identity(index),
        }
    };
    if blob.mirror_x {
        // Pairs mirrored across the blob's x-plane: positions reflect, the
        // rotation reflects as (w, x, -y, -z) up to sign, scales and colors copy.
        while out.len() < blob.count {
            let off = sample_center(blob.shape, rng);
            let g = make(off, rng);
            let mut m = g.clone();
            m.position[0] = 2.0 * blob.center[0] - g.position[0];
            let [w, x, y, z] = g.rotation;
            m.rotation = [w, x, -y, -z];
            out.push(g);
            if out.len() < blob.count {
                out.push(m);
            }
        }
    } else {
        for _ in 0..blob.count {
            let off = sample_center(blob.shape, rng);
            out.push(make(off, rng));
        }
    }
    out
}

/// Ground-truth scene and per-Gaussian blob ids (1-based).
pub fn synth_ground_truth(spec: &SynthSpec, seed: u64) -> Result<(Scene, Vec<u32>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussians = Vec::new();
    let mut groups = Vec::new();
    for (b, blob) in spec.blobs.iter().enumerate() {
        let gs = blob_gaussians(blob, b, spec, &mut rng);
        groups.extend(std::iter::repeat_n(b as u32 + 1, gs.len()));
        gaussians.extend(gs);
    }
    let mut classifier = Classifier::zeros(IDENTITY_DIM);
    for d in 0..IDENTITY_DIM {
        classifier.weights[d * IDENTITY_DIM + d] = 1.0;
    }
    let scene = Scene {
        gaussians,
        classifier,
        sh_degree: spec.sh_degree,
        metadata: SceneMetadata { seed: Some(seed), source: "synth".into(), iterations: 0 },
    };
    Ok((scene, groups))
}

/// Instance mask of a rendered one-hot identity image: argmax + 1 where the
/// accumulated alpha exceeds 0.5, else 0.
pub fn mask_from_render(identity: &Image, transmittance: &[f64], channels: usize) -> MaskMap {
    let ids = (0..identity.pixel_count())
        .map(|p| {
            if 1.0 - transmittance[p] > 0.5 {
                let o = p * identity.channels;
                argmax(&identity.data[o..o + channels]) as u32 + 1
            } else {
                0
            }
        })
        .collect();
    MaskMap { width: identity.width, height: identity.height, ids }
}

pub fn render_views(scene: &Scene, cameras: &[Camera], background: [f64; 3], channels: usize) -> Result<SynthViews> {
    let cfg = RenderConfig { background, trace_branches: false };
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for cam in cameras {
        let out = render_forward(scene, cam, &cfg)?;
        masks.push(mask_from_render(&out.identity, &out.final_transmittance, channels));
        images.push(out.color);
    }
    Ok(SynthViews { cameras: cameras.to_vec(), images, masks })
}

pub fn synth_scene(spec: &SynthSpec, seed: u64) -> Result<SynthOutput> {
    let (scene, groups) = synth_ground_truth(spec, seed)?;
    let (train_cams, test_cams) = spec.cameras()?;
    let k = spec.blobs.len();
    let train = render_views(&scene, &train_cams, spec.background, k)?;
    let test = render_views(&scene, &test_cams, spec.background, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_901d);
    let points = scene
        .gaussians
        .iter()
        .map(|g| {
            let s = g.scale().iter().sum::<f64>() / 3.0 * spec.point_noise;
            let p = [0, 1, 2].map(|k| {
                let z: f64 = StandardNormal.sample(&mut rng);
                g.position[k] + s * z
            });
            let c = g.sh[0].map(sh::dc_to_rgb);
            (p, c)
        })
        .collect();
    Ok(SynthOutput { scene, groups, train, test, points })
}

/// Per-view random relabeling of instance ids, mimicking an unassociated segmenter.
pub fn permute_ids(masks: &[MaskMap], seed: u64) -> Vec<MaskMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    masks
        .iter()
        .map(|m| {
            let k = m.max_id() as usize;
            let mut labels: Vec<u32> = (1..=(4 * k.max(1)) as u32).collect();
            labels.shuffle(&mut rng);
            let ids = m.ids.iter().map(|&v| if v == 0 { 0 } else { labels[v as usize - 1] }).collect();
            MaskMap { width: m.width, height: m.height, ids }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthGroups {
    pub seed: u64,
    pub spec: SynthSpec,
    /// Blob id (1-based) of every Gaussian of `gt_scene.ply`.
    pub groups: Vec<u32>,
}

/// Training settings for synthetic data: the spec's background, a 2000-step
/// schedule, and identity losses that do not move opacity or shape (id-0
/// background pixels carry no label, so the 2D loss would otherwise dilate
/// silhouettes).
pub fn synth_train_config(spec: &SynthSpec) -> TrainConfig {
    TrainConfig { iterations: 2000, background: spec.background, identity_geometry_grad: false, ..TrainConfig::default() }
}

/// Writes `train/`, `test/` (cameras, images, masks; `train/masks_raw` holds
/// per-view permuted ids), `train_config.json`, `points.ply`, `gt_scene.ply` and `gt_groups.json`.
pub fn write_synth(out: &SynthOutput, spec: &SynthSpec, seed: u64, dir: &Path) -> Result<()> {
    for (name, views) in [("train", &out.train), ("test", &out.test)] {
        let d = dir.join(name);
        let masks: Vec<Option<MaskMap>> = views.masks.iter().cloned().map(Some).collect();
        save_dataset(&d, &views.cameras, &views.images, &masks)?;
        if name == "train" {
            let raw = d.join("masks_raw");
            fs::create_dir_all(&raw).map_err(|e| Error::io(&raw, e))?;
            for (i, m) in permute_ids(&views.masks, seed).iter().enumerate() {
                write_mask(m, &raw.join(format!("{i:03}.png")))?;
            }
        }
    }
    let path = dir.join("train_config.json");
    let json = serde_json::to_string_pretty(&synth_train_config(spec)).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    save_points(&out.points, &dir.join("points.ply"))?;
    save_scene(&out.scene, &dir.join("gt_scene.ply"))?;
    let gt = GroundTruthGroups { seed, spec: spec.clone(), groups: out.groups.clone() };
    let path = dir.join("gt_groups.json");
    let json = serde_json::to_string_pretty(&gt).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}
