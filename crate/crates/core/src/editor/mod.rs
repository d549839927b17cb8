//! Local editing of grouped scenes: classification into groups, removal,
//! location swaps, recoloring and group-restricted fine-tuning.

pub mod hull;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::MaskMap;
use crate::io::dataset::{load_dataset, LoadOptions};
use crate::losses::RegionWeights;
use crate::rasterizer::{render_forward, RenderConfig};
use crate::scene::{argmax, neighbor_scales, seed_gaussian, softmax_in_place, Camera, InitConfig, Scene};
use crate::sh;
use crate::trainer::{Freeze, LossMode, ParamGroup, TrainConfig, TrainView, Trainer};
use crate::{Error, Result};

use hull::ConvexHull;

/// Per-Gaussian argmax class and its softmax probability.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLabels {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
}

pub fn classify_gaussians(scene: &Scene) -> GroupLabels {
    let (labels, confidence) = scene
        .gaussians
        .par_iter()
        .map(|g| {
            let mut p = scene.classifier.logits(&g.identity);
            let label = argmax(&p);
            softmax_in_place(&mut p);
            (label, p[label])
        })
        .unzip();
    GroupLabels { labels, confidence }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectOptions {
    /// Also take Gaussians inside the convex hull of the group's positions.
    pub convex_hull: bool,
    /// Require at least this softmax confidence for membership.
    pub min_confidence: Option<f64>,
}

/// Sorted indices of the Gaussians in group `id`.
pub fn select_group(scene: &Scene, labels: &GroupLabels, id: usize, opts: &SelectOptions) -> Result<Vec<usize>> {
    if labels.labels.len() != scene.len() {
        return Err(Error::ShapeMismatch("labels do not match the scene".into()));
    }
    let member: Vec<bool> = labels
        .labels
        .iter()
        .zip(&labels.confidence)
        .map(|(&l, &c)| l == id && opts.min_confidence.is_none_or(|t| c >= t))
        .collect();
    let mut sel: Vec<usize> = (0..scene.len()).filter(|&i| member[i]).collect();
    if sel.is_empty() {
        return Err(Error::GroupNotPresent(id));
    }
    if opts.convex_hull {
        let pts: Vec<[f64; 3]> = sel.iter().map(|&i| scene.gaussians[i].position).collect();
        if let Some(h) = ConvexHull::build(&pts) {
            let extra: Vec<usize> = (0..scene.len())
                .into_par_iter()
                .filter(|&i| !member[i] && h.contains(scene.gaussians[i].position))
                .collect();
            sel.extend(extra);
            sel.sort_unstable();
        }
    }
    Ok(sel)
}

fn without(scene: &Scene, remove: &[usize]) -> Scene {
    let drop: BTreeSet<usize> = remove.iter().copied().collect();
    scene.select((0..scene.len()).filter(|i| !drop.contains(i)))
}

/// Deletes group `id` (and optionally everything inside its convex hull).
pub fn remove_group(scene: &Scene, id: usize, convex_hull: bool) -> Result<Scene> {
    let labels = classify_gaussians(scene);
    let sel = select_group(scene, &labels, id, &SelectOptions { convex_hull, min_confidence: None })?;
    Ok(without(scene, &sel))
}

fn centroid(scene: &Scene, idx: &[usize]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for &i in idx {
        for k in 0..3 {
            c[k] += scene.gaussians[i].position[k];
        }
    }
    c.map(|v| v / idx.len() as f64)
}

/// Exchanges the locations of groups `a` and `b` by translating each onto the
/// other's centroid.
pub fn recompose_swap(scene: &Scene, a: usize, b: usize) -> Result<Scene> {
    let labels = classify_gaussians(scene);
    let opts = SelectOptions::default();
    let sa = select_group(scene, &labels, a, &opts)?;
    let sb = select_group(scene, &labels, b, &opts)?;
    if a == b {
        return Ok(scene.clone());
    }
    let (ca, cb) = (centroid(scene, &sa), centroid(scene, &sb));
    let mut out = scene.clone();
    for &i in &sa {
        for k in 0..3 {
            out.gaussians[i].position[k] += cb[k] - ca[k];
        }
    }
    for &i in &sb {
        for k in 0..3 {
            out.gaussians[i].position[k] += ca[k] - cb[k];
        }
    }
    Ok(out)
}

/// Sets group `id` to a constant view-independent color.
pub fn recolor_constant(scene: &Scene, id: usize, rgb: [f64; 3]) -> Result<Scene> {
    let labels = classify_gaussians(scene);
    let sel = select_group(scene, &labels, id, &SelectOptions::default())?;
    let mut out = scene.clone();
    for &i in &sel {
        let g = &mut out.gaussians[i];
        g.sh.iter_mut().for_each(|c| *c = [0.0; 3]);
        g.sh[0] = rgb.map(sh::rgb_to_dc);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub weights: RegionWeights,
    /// Learning rates and background; densification and identity losses are always off.
    pub train: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { iterations: 500, weights: RegionWeights::default(), train: TrainConfig::default() }
    }
}

/// Optimizes only `unfreeze` parameters of the Gaussians in `selection` against `targets`.
pub fn finetune_selection(
    scene: &Scene,
    selection: &[usize],
    unfreeze: &BTreeSet<ParamGroup>,
    targets: &[TrainView],
    config: &FinetuneConfig,
) -> Result<Scene> {
    if config.iterations == 0 {
        return Ok(scene.clone());
    }
    if targets.is_empty() {
        return Err(Error::InvalidConfig("fine-tuning needs at least one target view".into()));
    }
    if unfreeze.is_empty() {
        return Err(Error::InvalidConfig("fine-tuning needs a nonempty unfreeze set".into()));
    }
    let mut trainable = vec![false; scene.len()];
    for &i in selection {
        trainable[i] = true;
    }
    let freeze = Freeze { gaussians: Some(trainable), groups: unfreeze.clone(), classifier: false };
    let cfg = TrainConfig {
        iterations: config.iterations,
        densify: false,
        opacity_reset_interval: 0,
        lambda_2d: 0.0,
        lambda_3d: 0.0,
        log_interval: 0,
        ..config.train.clone()
    };
    let mut trainer = Trainer::with_options(scene.clone(), targets, cfg, freeze, LossMode::Region(config.weights))?;
    trainer.run(|_| {})?;
    Ok(trainer.scene)
}

pub fn finetune_group(
    scene: &Scene,
    id: usize,
    unfreeze: &BTreeSet<ParamGroup>,
    targets: &[TrainView],
    config: &FinetuneConfig,
) -> Result<Scene> {
    let labels = classify_gaussians(scene);
    let sel = select_group(scene, &labels, id, &SelectOptions::default())?;
    finetune_selection(scene, &sel, unfreeze, targets, config)
}

pub const DEFAULT_SCAFFOLD_SIZE: usize = 2000;

/// Removes group `id` with its convex-hull interior and seeds `n_new` gray
/// Gaussians uniformly inside the removed region's bounding box. Returns the
/// new scene and the indices of the seeded Gaussians (the trainable set for
/// the subsequent fine-tune).
pub fn inpaint_scaffold(scene: &Scene, id: usize, n_new: usize, seed: u64) -> Result<(Scene, Vec<usize>)> {
    let labels = classify_gaussians(scene);
    let sel = select_group(scene, &labels, id, &SelectOptions { convex_hull: true, min_confidence: None })?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &sel {
        for k in 0..3 {
            lo[k] = lo[k].min(scene.gaussians[i].position[k]);
            hi[k] = hi[k].max(scene.gaussians[i].position[k]);
        }
    }
    let mut out = without(scene, &sel);
    if n_new == 0 {
        return Ok((out, Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 3]> = (0..n_new)
        .map(|_| [0, 1, 2].map(|k| if hi[k] > lo[k] { rng.random_range(lo[k]..=hi[k]) } else { lo[k] }))
        .collect();
    let scales = neighbor_scales(&pts, 3);
    let cfg = InitConfig { sh_degree: scene.sh_degree, classes: scene.classifier.classes, ..InitConfig::default() };
    let start = out.len();
    for (p, s) in pts.iter().zip(scales) {
        out.gaussians.push(seed_gaussian(*p, [0.5; 3], s, &cfg, &mut rng));
    }
    Ok((out, (start..start + n_new).collect()))
}

/// Predicted instance map of one view: argmax class + 1 where the rendered
/// alpha exceeds 0.5, else 0.
pub fn segment_view(scene: &Scene, cam: &Camera, background: [f64; 3]) -> Result<MaskMap> {
    let out = render_forward(scene, cam, &RenderConfig { background, trace_branches: false })?;
    let c = scene.classifier.classes;
    let ids: Vec<u32> = (0..cam.width * cam.height)
        .into_par_iter()
        .map(|p| {
            if 1.0 - out.final_transmittance[p] <= 0.5 {
                return 0;
            }
            let mut logits = vec![0.0; c];
            scene.classifier.logits_into(out.identity.pixel(p % cam.width, p / cam.width), &mut logits);
            argmax(&logits) as u32 + 1
        })
        .collect();
    MaskMap::from_ids(cam.width, cam.height, ids)
}

fn default_scaffold() -> usize {
    DEFAULT_SCAFFOLD_SIZE
}

/// One edit. `id` is a classifier class (a mask id minus one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EditOp {
    Remove {
        id: usize,
        #[serde(default)]
        convex_hull: bool,
    },
    Swap {
        a: usize,
        b: usize,
    },
    /// Constant color when `color` is set; otherwise an SH-only fine-tune against `targets`.
    Recolor {
        id: usize,
        #[serde(default)]
        color: Option<[f64; 3]>,
        #[serde(default)]
        targets: Option<PathBuf>,
        #[serde(default)]
        iterations: Option<usize>,
    },
    /// `targets` is a dataset directory; its masks, when present, mark the edit region.
    Finetune {
        id: usize,
        unfreeze: Vec<ParamGroup>,
        targets: PathBuf,
        #[serde(default)]
        iterations: Option<usize>,
    },
    InpaintScaffold {
        id: usize,
        #[serde(default = "default_scaffold")]
        n_new: usize,
        #[serde(default)]
        targets: Option<PathBuf>,
        #[serde(default)]
        iterations: Option<usize>,
    },
}

impl EditOp {
    pub fn ids(&self) -> Vec<usize> {
        match self {
            EditOp::Swap { a, b } => vec![*a, *b],
            EditOp::Remove { id, .. }
            | EditOp::Recolor { id, .. }
            | EditOp::Finetune { id, .. }
            | EditOp::InpaintScaffold { id, .. } => vec![*id],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditScript {
    pub operations: Vec<EditOp>,
}

impl EditScript {
    pub fn validate(&self, classes: usize) -> Result<()> {
        for op in &self.operations {
            if let Some(id) = op.ids().into_iter().find(|&id| id >= classes) {
                return Err(Error::InvalidConfig(format!("edit id {id} is not below the class count {classes}")));
            }
            if let EditOp::Finetune { unfreeze, .. } = op {
                if unfreeze.is_empty() {
                    return Err(Error::InvalidConfig("finetune needs a nonempty unfreeze set".into()));
                }
            }
            if let EditOp::Recolor { color: None, targets: None, .. } = op {
                return Err(Error::InvalidConfig("recolor needs a color or target views".into()));
            }
        }
        Ok(())
    }
}

/// Target views of a fine-tune: dataset images, with nonzero mask pixels as the region.
pub fn load_targets(dir: &Path) -> Result<Vec<TrainView>> {
    let ds = load_dataset(dir, LoadOptions::default())?;
    Ok(ds
        .cameras
        .into_iter()
        .zip(ds.images)
        .zip(ds.masks)
        .map(|((camera, image), mask)| TrainView {
            camera,
            image,
            region: mask.map(|m| m.ids.iter().map(|&v| v != 0).collect()),
            mask: None,
        })
        .collect())
}

/// Applies every operation in order; relative target paths resolve against `base`.
pub fn apply_script(scene: &Scene, script: &EditScript, base: &Path, config: &FinetuneConfig, seed: u64) -> Result<Scene> {
    script.validate(scene.classifier.classes)?;
    let mut cur = scene.clone();
    let iters = |o: &Option<usize>| FinetuneConfig { iterations: o.unwrap_or(config.iterations), ..config.clone() };
    for op in &script.operations {
        cur = match op {
            EditOp::Remove { id, convex_hull } => remove_group(&cur, *id, *convex_hull)?,
            EditOp::Swap { a, b } => recompose_swap(&cur, *a, *b)?,
            EditOp::Recolor { id, color: Some(c), .. } => recolor_constant(&cur, *id, *c)?,
            EditOp::Recolor { id, targets, iterations, .. } => {
                let t = load_targets(&base.join(targets.as_ref().expect("validated")))?;
                finetune_group(&cur, *id, &[ParamGroup::Sh].into_iter().collect(), &t, &iters(iterations))?
            }
            EditOp::Finetune { id, unfreeze, targets, iterations } => {
                let t = load_targets(&base.join(targets))?;
                finetune_group(&cur, *id, &unfreeze.iter().copied().collect(), &t, &iters(iterations))?
            }
            EditOp::InpaintScaffold { id, n_new, targets, iterations } => {
                let (s, new) = inpaint_scaffold(&cur, *id, *n_new, seed)?;
                match targets {
                    Some(t) => {
                        let t = load_targets(&base.join(t))?;
                        let all = ParamGroup::ALL.into_iter().collect();
                        finetune_selection(&s, &new, &all, &t, &iters(iterations))?
                    }
                    None => s,
                }
            }
        };
    }
    Ok(cur)
}
