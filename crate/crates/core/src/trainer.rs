//! Optimization loop: per-view rendering, loss evaluation, Adam updates and
//! adaptive density control.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::image::{Image, MaskMap};
use crate::losses::{self, Identity3dConfig};
use crate::projection::quat_to_matrix;
use crate::rasterizer::{render_backward_with, render_forward, RenderConfig, SceneGradients};
use crate::scene::{logit, Camera, Scene, IDENTITY_DIM};
use crate::sh;
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS_GAUSSIAN: f64 = 1e-15;
pub const EPS_IDENTITY: f64 = 1e-8;

/// Adam moments for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, eps: f64) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0, eps }
    }
}

/// One bias-corrected Adam update. `trainable`, when given, marks which
/// `dim`-sized chunks may change; the others keep their parameters and moments.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    group: &'static str,
    trainable: Option<(&[bool], usize)>,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam group {group}: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { group, index });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2_sqrt = (1.0 - BETA2.powi(t)).sqrt();
    let step_size = lr / bc1;
    for i in 0..params.len() {
        if let Some((mask, dim)) = trainable {
            if !mask[i / dim] {
                continue;
            }
        }
        let g = grads[i];
        let m = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        let v = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        params[i] -= step_size * m / (v.sqrt() / bc2_sqrt + state.eps);
    }
    Ok(())
}

/// Trainable per-Gaussian parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Position,
    Scale,
    Rotation,
    Opacity,
    Sh,
    Identity,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Position,
        ParamGroup::Scale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Sh,
        ParamGroup::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Scale => "scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Sh => "sh",
            ParamGroup::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| g.name() == s)
    }

    fn dim(self, sh_degree: usize) -> usize {
        match self {
            ParamGroup::Position | ParamGroup::Scale => 3,
            ParamGroup::Rotation => 4,
            ParamGroup::Opacity => 1,
            ParamGroup::Sh => 3 * sh::coeff_count(sh_degree),
            ParamGroup::Identity => IDENTITY_DIM,
        }
    }

    fn eps(self) -> f64 {
        if self == ParamGroup::Identity {
            EPS_IDENTITY
        } else {
            EPS_GAUSSIAN
        }
    }

    fn gather(self, scene: &Scene) -> Vec<f64> {
        let mut out = Vec::with_capacity(scene.len() * self.dim(scene.sh_degree));
        for g in &scene.gaussians {
            match self {
                ParamGroup::Position => out.extend_from_slice(&g.position),
                ParamGroup::Scale => out.extend_from_slice(&g.log_scale),
                ParamGroup::Rotation => out.extend_from_slice(&g.rotation),
                ParamGroup::Opacity => out.push(g.opacity_logit),
                ParamGroup::Sh => g.sh.iter().for_each(|c| out.extend_from_slice(c)),
                ParamGroup::Identity => out.extend_from_slice(&g.identity),
            }
        }
        out
    }

    fn gather_grads(self, grads: &SceneGradients, sh_degree: usize) -> Vec<f64> {
        let nc = sh::coeff_count(sh_degree);
        let mut out = Vec::with_capacity(grads.gaussians.len() * self.dim(sh_degree));
        for g in &grads.gaussians {
            match self {
                ParamGroup::Position => out.extend_from_slice(&g.position),
                ParamGroup::Scale => out.extend_from_slice(&g.log_scale),
                ParamGroup::Rotation => out.extend_from_slice(&g.rotation),
                ParamGroup::Opacity => out.push(g.opacity_logit),
                ParamGroup::Sh => g.sh[..nc].iter().for_each(|c| out.extend_from_slice(c)),
                ParamGroup::Identity => out.extend_from_slice(&g.identity),
            }
        }
        out
    }

    fn scatter(self, scene: &mut Scene, values: &[f64]) {
        let dim = self.dim(scene.sh_degree);
        for (g, v) in scene.gaussians.iter_mut().zip(values.chunks_exact(dim)) {
            match self {
                ParamGroup::Position => g.position.copy_from_slice(v),
                ParamGroup::Scale => g.log_scale.copy_from_slice(v),
                ParamGroup::Rotation => g.rotation.copy_from_slice(v),
                ParamGroup::Opacity => g.opacity_logit = v[0],
                ParamGroup::Sh => g.sh.iter_mut().zip(v.chunks_exact(3)).for_each(|(c, s)| c.copy_from_slice(s)),
                ParamGroup::Identity => g.identity.copy_from_slice(v),
            }
        }
    }
}

/// Where each Gaussian of a densified scene came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Survivor of the previous scene (keeps its optimizer moments).
    Kept(usize),
    /// Clone or split child of the given previous Gaussian.
    Spawned(usize),
}

/// Adam states for every Gaussian group and the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub groups: Vec<(ParamGroup, AdamState)>,
    pub classifier: AdamState,
}

impl Optimizer {
    pub fn new(scene: &Scene) -> Self {
        let n = scene.len();
        let groups = ParamGroup::ALL
            .into_iter()
            .map(|g| (g, AdamState::new(n * g.dim(scene.sh_degree), g.eps())))
            .collect();
        let c = &scene.classifier;
        Optimizer { groups, classifier: AdamState::new(c.weights.len() + c.bias.len(), EPS_IDENTITY) }
    }

    /// Rebuilds per-Gaussian moments after densification: kept Gaussians carry
    /// theirs, spawned ones start from zero.
    pub fn reindex(&mut self, origins: &[Origin], sh_degree: usize) {
        for (group, state) in self.groups.iter_mut() {
            let dim = group.dim(sh_degree);
            let mut m = vec![0.0; origins.len() * dim];
            let mut v = vec![0.0; origins.len() * dim];
            for (i, o) in origins.iter().enumerate() {
                if let Origin::Kept(src) = *o {
                    m[i * dim..(i + 1) * dim].copy_from_slice(&state.m[src * dim..(src + 1) * dim]);
                    v[i * dim..(i + 1) * dim].copy_from_slice(&state.v[src * dim..(src + 1) * dim]);
                }
            }
            state.m = m;
            state.v = v;
        }
    }

    fn state_mut(&mut self, group: ParamGroup) -> &mut AdamState {
        &mut self.groups.iter_mut().find(|(g, _)| *g == group).expect("all groups present").1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_position: f64,
    pub lr_position_final: f64,
    /// Steps over which the position rate decays exponentially.
    pub lr_position_max_steps: usize,
    pub lr_sh: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_identity: f64,
    pub lr_classifier: f64,
    pub lambda_ssim: f64,
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    pub knn_k: usize,
    pub knn_m: usize,
    pub knn_max_points: usize,
    pub knn_detach_neighbors: bool,
    /// Let the identity loss move opacity and shape, not only the encodings.
    pub identity_geometry_grad: bool,
    pub densify: bool,
    pub densify_interval: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    pub grad_threshold: f64,
    /// Split/clone boundary in world units; `None` means 1% of the scene extent.
    pub size_threshold: Option<f64>,
    pub prune_opacity: f64,
    /// Prune when the largest scale exceeds this fraction of the scene extent.
    pub max_world_size_fraction: f64,
    /// Screen-radius prune limit in pixels, active after the first opacity reset.
    pub max_screen_radius: Option<f64>,
    /// 0 disables opacity resets.
    pub opacity_reset_interval: usize,
    pub background: [f64; 3],
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_position_max_steps: 30_000,
            lr_sh: 2.5e-3,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_identity: 2.5e-3,
            lr_classifier: 5e-4,
            lambda_ssim: losses::DEFAULT_LAMBDA_SSIM,
            lambda_2d: losses::DEFAULT_LAMBDA_2D,
            lambda_3d: losses::DEFAULT_LAMBDA_3D,
            knn_k: 5,
            knn_m: 1000,
            knn_max_points: 300_000,
            knn_detach_neighbors: false,
            identity_geometry_grad: true,
            densify: true,
            densify_interval: 100,
            densify_from: 500,
            densify_until: 15_000,
            grad_threshold: 2e-4,
            size_threshold: None,
            prune_opacity: 5e-3,
            max_world_size_fraction: 0.1,
            max_screen_radius: Some(20.0),
            opacity_reset_interval: 3000,
            background: [0.0; 3],
            log_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.lr_position,
            self.lr_position_final,
            self.lr_sh,
            self.lr_opacity,
            self.lr_scale,
            self.lr_rotation,
            self.lr_identity,
            self.lr_classifier,
        ];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.densify && self.iterations > 0 && !(self.densify_from < self.densify_until) {
            return Err(Error::InvalidConfig("densify_from must be below densify_until".into()));
        }
        if self.densify && self.densify_interval == 0 {
            return Err(Error::InvalidConfig("densify_interval must be positive".into()));
        }
        if self.lambda_2d < 0.0 || self.lambda_3d < 0.0 || !(0.0..=1.0).contains(&self.lambda_ssim) {
            return Err(Error::InvalidConfig("loss weights out of range".into()));
        }
        if self.lambda_3d > 0.0 && (self.knn_k == 0 || self.knn_m == 0) {
            return Err(Error::InvalidConfig("knn_k and knn_m must be positive".into()));
        }
        Ok(())
    }

    /// Position learning rate at `step`, log-linear between the initial and final rates.
    pub fn position_lr(&self, step: usize, extent: f64) -> f64 {
        let t = (step as f64 / self.lr_position_max_steps.max(1) as f64).clamp(0.0, 1.0);
        let lr = (self.lr_position.ln() * (1.0 - t) + self.lr_position_final.ln() * t).exp();
        lr * extent
    }

    fn group_lr(&self, group: ParamGroup, step: usize, extent: f64) -> f64 {
        match group {
            ParamGroup::Position => self.position_lr(step, extent),
            ParamGroup::Scale => self.lr_scale,
            ParamGroup::Rotation => self.lr_rotation,
            ParamGroup::Opacity => self.lr_opacity,
            ParamGroup::Sh => self.lr_sh,
            ParamGroup::Identity => self.lr_identity,
        }
    }
}

/// One training view. `region` restricts the fine-tuning loss (see [`LossMode`]).
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub image: Image,
    pub mask: Option<MaskMap>,
    pub region: Option<Vec<bool>>,
}

impl TrainView {
    pub fn new(camera: Camera, image: Image, mask: Option<MaskMap>) -> Self {
        TrainView { camera, image, mask, region: None }
    }
}

/// Image loss used for the color term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossMode {
    /// `(1-λ)·L1 + λ·D-SSIM` over the whole image.
    Reconstruction,
    /// L1 outside the view's region, D-SSIM (and optionally L1) inside the region's bounding box.
    Region(losses::RegionWeights),
}

/// Which parameters may change.
#[derive(Debug, Clone, PartialEq)]
pub struct Freeze {
    /// Per-Gaussian trainable flags; `None` trains every Gaussian.
    pub gaussians: Option<Vec<bool>>,
    pub groups: BTreeSet<ParamGroup>,
    pub classifier: bool,
}

impl Default for Freeze {
    fn default() -> Self {
        Freeze { gaussians: None, groups: ParamGroup::ALL.into_iter().collect(), classifier: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub l_rec: f64,
    pub l_2d: f64,
    pub l_3d: f64,
    pub gaussian_count: usize,
}

/// Accumulated densification statistics since the last densify step.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyStats {
    pub grad_accum: Vec<f64>,
    pub denom: Vec<u32>,
    pub max_radii: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        DensifyStats { grad_accum: vec![0.0; n], denom: vec![0; n], max_radii: vec![0; n] }
    }

    pub fn add(&mut self, grads: &SceneGradients, radii: &[u32]) {
        for i in 0..self.grad_accum.len() {
            if grads.visible[i] {
                self.grad_accum[i] += grads.mean2d_grad_norm[i];
                self.denom[i] += 1;
            }
            self.max_radii[i] = self.max_radii[i].max(radii[i]);
        }
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.denom[i] == 0 {
            0.0
        } else {
            self.grad_accum[i] / self.denom[i] as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyParams {
    pub grad_threshold: f64,
    pub size_threshold: f64,
    pub prune_opacity: f64,
    pub max_world_size: Option<f64>,
    pub max_screen_radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DensifyReport {
    pub pruned: usize,
    pub cloned: usize,
    pub split: usize,
}

/// Prunes transparent or oversized Gaussians, then clones small and splits
/// large survivors whose mean screen-space gradient exceeds the threshold.
pub fn densify_and_prune(
    scene: &Scene,
    stats: &DensifyStats,
    params: &DensifyParams,
    rng: &mut impl Rng,
) -> (Scene, Vec<Origin>, DensifyReport) {
    let mut report = DensifyReport::default();
    let mut kept = Vec::new();
    let mut cloned = Vec::new();
    let mut split = Vec::new();
    for (i, g) in scene.gaussians.iter().enumerate() {
        let too_large = params.max_world_size.is_some_and(|s| g.max_scale() > s)
            || params.max_screen_radius.is_some_and(|r| stats.max_radii[i] as f64 > r);
        if g.opacity() < params.prune_opacity || too_large {
            report.pruned += 1;
            continue;
        }
        if stats.mean_grad(i) > params.grad_threshold {
            if g.max_scale() > params.size_threshold {
                split.push(i);
                continue;
            }
            cloned.push(i);
        }
        kept.push(i);
    }
    let mut gaussians: Vec<_> = kept.iter().map(|&i| scene.gaussians[i].clone()).collect();
    let mut origins: Vec<Origin> = kept.iter().map(|&i| Origin::Kept(i)).collect();
    for &i in &cloned {
        gaussians.push(scene.gaussians[i].clone());
        origins.push(Origin::Spawned(i));
    }
    let shrink = 1.6f64.ln();
    for &i in &split {
        let parent = &scene.gaussians[i];
        let rot = quat_to_matrix(parent.rotation);
        let s = parent.scale();
        for _ in 0..2 {
            let z: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
            let local = nalgebra::Vector3::new(z[0] * s[0], z[1] * s[1], z[2] * s[2]);
            let offset = rot * local;
            let mut child = parent.clone();
            for k in 0..3 {
                child.position[k] += offset[k];
                child.log_scale[k] -= shrink;
            }
            gaussians.push(child);
            origins.push(Origin::Spawned(i));
        }
    }
    report.cloned = cloned.len();
    report.split = split.len();
    let out = Scene {
        gaussians,
        classifier: scene.classifier.clone(),
        sh_degree: scene.sh_degree,
        metadata: scene.metadata.clone(),
    };
    (out, origins, report)
}

/// Radius of the camera centers around their centroid, padded by 10%.
pub fn scene_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<_> = cameras.iter().map(|c| c.center()).collect();
    let mean = centers.iter().fold(nalgebra::Vector3::zeros(), |a, c| a + c) / centers.len() as f64;
    let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if radius > 0.0 {
        radius * 1.1
    } else {
        1.0
    }
}

/// Steppable training state.
pub struct Trainer<'a> {
    pub scene: Scene,
    pub optimizer: Optimizer,
    pub stats: DensifyStats,
    pub iteration: usize,
    pub extent: f64,
    views: &'a [TrainView],
    config: TrainConfig,
    freeze: Freeze,
    loss_mode: LossMode,
    lambda_2d: f64,
    lambda_3d: f64,
    order: Vec<usize>,
    cursor: usize,
    view_rng: ChaCha8Rng,
    knn_rng: ChaCha8Rng,
    densify_rng: ChaCha8Rng,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<'a> Trainer<'a> {
    pub fn new(scene: Scene, views: &'a [TrainView], config: TrainConfig) -> Result<Self> {
        Self::with_options(scene, views, config, Freeze::default(), LossMode::Reconstruction)
    }

    pub fn with_options(
        scene: Scene,
        views: &'a [TrainView],
        config: TrainConfig,
        freeze: Freeze,
        loss_mode: LossMode,
    ) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        if views.is_empty() {
            return Err(Error::InvalidConfig("training needs at least one view".into()));
        }
        if scene.is_empty() {
            return Err(Error::EmptyInitialization);
        }
        let classes = scene.classifier.classes;
        for v in views {
            if v.image.width != v.camera.width || v.image.height != v.camera.height || v.image.channels != 3 {
                return Err(Error::ShapeMismatch("view image does not match its camera".into()));
            }
            if let Some(m) = &v.mask {
                if m.width != v.camera.width || m.height != v.camera.height {
                    return Err(Error::ShapeMismatch("mask does not match its camera".into()));
                }
                let id = m.max_id();
                if id as usize > classes {
                    return Err(Error::MaskIdOutOfRange { id, channels: classes });
                }
            }
            if let Some(r) = &v.region {
                if r.len() != v.camera.width * v.camera.height {
                    return Err(Error::ShapeMismatch("region does not match its camera".into()));
                }
            }
        }
        if let Some(g) = &freeze.gaussians {
            if g.len() != scene.len() {
                return Err(Error::ShapeMismatch("freeze mask does not match the scene".into()));
            }
        }
        let has_masks = views.iter().any(|v| v.mask.is_some());
        let (lambda_2d, lambda_3d) =
            if has_masks && loss_mode == LossMode::Reconstruction { (config.lambda_2d, config.lambda_3d) } else { (0.0, 0.0) };
        let cameras: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
        let extent = scene_extent(&cameras);
        let n = scene.len();
        Ok(Trainer {
            optimizer: Optimizer::new(&scene),
            stats: DensifyStats::new(n),
            iteration: 0,
            extent,
            views,
            freeze,
            loss_mode,
            lambda_2d,
            lambda_3d,
            order: Vec::new(),
            cursor: 0,
            view_rng: stream_rng(config.seed, 1),
            knn_rng: stream_rng(config.seed, 2),
            densify_rng: stream_rng(config.seed, 3),
            config,
            scene,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Effective identity-loss weights (zero without masks or in region mode).
    pub fn lambdas(&self) -> (f64, f64) {
        (self.lambda_2d, self.lambda_3d)
    }

    fn next_view(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.views.len()).collect();
            self.order.shuffle(&mut self.view_rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn image_loss(&self, render: &Image, view: &TrainView) -> Result<(f64, Image)> {
        match (&self.loss_mode, &view.region) {
            (LossMode::Region(w), Some(region)) => losses::region_loss(render, &view.image, region, w),
            _ => losses::reconstruction_loss(render, &view.image, self.config.lambda_ssim),
        }
    }

    /// Runs one iteration and returns its loss components.
    pub fn step(&mut self) -> Result<LogRecord> {
        self.iteration += 1;
        let it = self.iteration;
        let view = &self.views[self.next_view()];
        let render_cfg = RenderConfig { background: self.config.background, trace_branches: false };
        let out = render_forward(&self.scene, &view.camera, &render_cfg)?;
        let (l_rec, d_color) = self.image_loss(&out.color, view)?;

        let mut l_2d = 0.0;
        let mut d_identity = None;
        let mut d_classifier = crate::scene::Classifier::zeros(self.scene.classifier.classes);
        if self.lambda_2d > 0.0 {
            if let Some(mask) = &view.mask {
                let o = losses::identity_2d_loss(&out.identity, &self.scene.classifier, mask)?;
                l_2d = o.loss;
                let mut d = o.d_identity;
                d.data.iter_mut().for_each(|v| *v *= self.lambda_2d);
                d_identity = Some(d);
                axpy(&mut d_classifier, &o.d_classifier, self.lambda_2d);
            }
        }
        let mut grads = render_backward_with(
            &self.scene,
            &view.camera,
            &out,
            &d_color,
            d_identity.as_ref(),
            self.config.identity_geometry_grad,
        )?;

        let mut l_3d = 0.0;
        if self.lambda_3d > 0.0 {
            let cfg = Identity3dConfig {
                k: self.config.knn_k,
                m: self.config.knn_m,
                max_points: self.config.knn_max_points,
                detach_neighbors: self.config.knn_detach_neighbors,
            };
            let seed = self.knn_rng.random::<u64>();
            if self.scene.len() > cfg.k {
                let o = losses::identity_3d_loss(&self.scene, &self.scene.classifier, &cfg, seed)?;
                l_3d = o.loss;
                for (g, d) in grads.gaussians.iter_mut().zip(&o.d_identity) {
                    for k in 0..IDENTITY_DIM {
                        g.identity[k] += self.lambda_3d * d[k];
                    }
                }
                axpy(&mut d_classifier, &o.d_classifier, self.lambda_3d);
            }
        }

        self.apply_gradients(&grads, &d_classifier)?;
        if self.config.densify && it < self.config.densify_until {
            self.stats.add(&grads, &out.radii);
        }
        self.adaptive_density_control()?;

        Ok(LogRecord { iteration: it, l_rec, l_2d, l_3d, gaussian_count: self.scene.len() })
    }

    fn apply_gradients(&mut self, grads: &SceneGradients, d_classifier: &crate::scene::Classifier) -> Result<()> {
        let sh_degree = self.scene.sh_degree;
        let mask = self.freeze.gaussians.as_deref();
        for group in ParamGroup::ALL {
            if !self.freeze.groups.contains(&group) {
                continue;
            }
            let lr = self.config.group_lr(group, self.iteration - 1, self.extent);
            let mut params = group.gather(&self.scene);
            let g = group.gather_grads(grads, sh_degree);
            let dim = group.dim(sh_degree);
            adam_step(&mut params, &g, self.optimizer.state_mut(group), lr, group.name(), mask.map(|m| (m, dim)))?;
            group.scatter(&mut self.scene, &params);
        }
        if self.freeze.classifier && (self.lambda_2d > 0.0 || self.lambda_3d > 0.0) {
            let c = &mut self.scene.classifier;
            let mut params: Vec<f64> = c.weights.iter().chain(&c.bias).copied().collect();
            let g: Vec<f64> = d_classifier.weights.iter().chain(&d_classifier.bias).copied().collect();
            adam_step(&mut params, &g, &mut self.optimizer.classifier, self.config.lr_classifier, "classifier", None)?;
            let nw = c.weights.len();
            c.weights.copy_from_slice(&params[..nw]);
            c.bias.copy_from_slice(&params[nw..]);
        }
        Ok(())
    }

    fn adaptive_density_control(&mut self) -> Result<()> {
        let it = self.iteration;
        let cfg = &self.config;
        if !cfg.densify || it >= cfg.densify_until {
            return Ok(());
        }
        if it > cfg.densify_from && it % cfg.densify_interval == 0 {
            let past_reset = cfg.opacity_reset_interval > 0 && it > cfg.opacity_reset_interval;
            let params = DensifyParams {
                grad_threshold: cfg.grad_threshold,
                size_threshold: cfg.size_threshold.unwrap_or(0.01 * self.extent),
                prune_opacity: cfg.prune_opacity,
                max_world_size: Some(cfg.max_world_size_fraction * self.extent),
                max_screen_radius: if past_reset { cfg.max_screen_radius } else { None },
            };
            let (scene, origins, _) = densify_and_prune(&self.scene, &self.stats, &params, &mut self.densify_rng);
            if scene.is_empty() {
                return Err(Error::Internal("densification removed every Gaussian".into()));
            }
            self.optimizer.reindex(&origins, scene.sh_degree);
            if let Some(mask) = &mut self.freeze.gaussians {
                *mask = origins
                    .iter()
                    .map(|o| match *o {
                        Origin::Kept(i) | Origin::Spawned(i) => mask[i],
                    })
                    .collect();
            }
            self.scene = scene;
            self.stats = DensifyStats::new(self.scene.len());
        }
        if cfg.opacity_reset_interval > 0 && it % cfg.opacity_reset_interval == 0 {
            self.reset_opacity();
        }
        Ok(())
    }

    /// Caps every opacity at 0.01 and clears the opacity moments.
    pub fn reset_opacity(&mut self) {
        let cap = logit(0.01);
        for g in &mut self.scene.gaussians {
            g.opacity_logit = g.opacity_logit.min(cap);
        }
        let state = self.optimizer.state_mut(ParamGroup::Opacity);
        state.m.iter_mut().for_each(|v| *v = 0.0);
        state.v.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Runs the remaining iterations, calling `on_log` every `log_interval` steps.
    pub fn run(&mut self, mut on_log: impl FnMut(&LogRecord)) -> Result<Vec<LogRecord>> {
        let mut log = Vec::new();
        while self.iteration < self.config.iterations {
            let rec = self.step()?;
            if self.config.log_interval > 0 && rec.iteration % self.config.log_interval == 0 {
                on_log(&rec);
                log.push(rec);
            }
        }
        Ok(log)
    }
}

fn axpy(acc: &mut crate::scene::Classifier, g: &crate::scene::Classifier, a: f64) {
    for (x, y) in acc.weights.iter_mut().zip(&g.weights) {
        *x += a * y;
    }
    for (x, y) in acc.bias.iter_mut().zip(&g.bias) {
        *x += a * y;
    }
}

/// Trains `scene` on `views` for `config.iterations` steps.
pub fn train(scene: Scene, views: &[TrainView], config: &TrainConfig) -> Result<(Scene, Vec<LogRecord>)> {
    train_logged(scene, views, config, |_| {})
}

/// [`train`] with a callback for every log record as it is produced.
pub fn train_logged(
    scene: Scene,
    views: &[TrainView],
    config: &TrainConfig,
    on_log: impl FnMut(&LogRecord),
) -> Result<(Scene, Vec<LogRecord>)> {
    if config.iterations == 0 {
        config.validate()?;
        return Ok((scene, Vec::new()));
    }
    let mut trainer = Trainer::new(scene, views, config.clone())?;
    let log = trainer.run(on_log)?;
    let mut scene = trainer.scene;
    scene.metadata.iterations += config.iterations;
    scene.metadata.seed = Some(config.seed);
    Ok((scene, log))
}
