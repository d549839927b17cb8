//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatgroup::editor::{
    classify_gaussians, finetune_group, recolor_constant, recompose_swap, remove_group, segment_view, FinetuneConfig,
};
use splatgroup::gradcheck::{check_render_gradients, random_check_scene, Tolerance};
use splatgroup::io::metrics::{psnr, segmentation_scores};
use splatgroup::io::ply::{load_scene, save_scene};
use splatgroup::io::synth::{blob_identity, synth_scene, synth_train_config, SynthOutput, SynthSpec};
use splatgroup::losses::{identity_2d_loss, identity_3d_loss, reconstruction_loss, Identity3dConfig};
use splatgroup::projection::project_gaussian;
use splatgroup::rasterizer::{render_forward, RenderConfig, ALPHA_MAX, ALPHA_MIN, TRANSMITTANCE_MIN};
use splatgroup::scene::{init_scene, seed_gaussian, InitConfig, SceneMetadata};
use splatgroup::sh;
use splatgroup::trainer::{train, Freeze, LossMode, ParamGroup, TrainConfig, TrainView, Trainer};
use splatgroup::{Camera, Classifier, Gaussian, Image, MaskMap, Scene, IDENTITY_DIM};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "gradient suite", gradient_suite),
        (2, "blending oracle", blending_oracle),
        (3, "3D regularizer oracle", regularizer_oracle),
        (4, "end-to-end synthetic", end_to_end),
        (5, "3D-regularization ablation", ablation),
        (6, "editing", editing),
        (7, "determinism", determinism),
        (8, "formats and CLI pipeline", formats),
    ];
    // ACCEPTANCE_ONLY=4,6 runs a subset.
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += usize::from(!o.pass);
        println!(
            "{} [{id}] {name}: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- criterion 1

fn fd_check(
    tol: &Tolerance,
    coords: usize,
    analytic: impl Fn(usize) -> f64,
    eval: impl Fn(usize, f64) -> f64,
    skip: impl Fn(usize) -> bool,
) -> (usize, usize, f64) {
    let (mut checked, mut passed, mut worst) = (0, 0, 0.0f64);
    for k in 0..coords {
        if skip(k) {
            continue;
        }
        let numeric = (eval(k, tol.step) - eval(k, -tol.step)) / (2.0 * tol.step);
        let a = analytic(k);
        checked += 1;
        if tol.accepts(a, numeric) {
            passed += 1;
        }
        let err = (a - numeric).abs();
        if err >= tol.abs {
            worst = worst.max(err / a.abs().max(numeric.abs()));
        }
    }
    (checked, passed, worst)
}

fn random_image(w: usize, h: usize, c: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_data(w, h, c, (0..w * h * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn random_classifier(classes: usize, rng: &mut ChaCha8Rng) -> Classifier {
    let mut c = Classifier::random(classes, rng);
    c.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    c
}

fn gradient_suite() -> Outcome {
    let tol = Tolerance::default();
    let mut pass = true;
    let mut parts = Vec::new();

    let (mut checked, mut excluded, mut worst) = (0, 0, 0.0f64);
    for seed in 0..3 {
        let (scene, cam) = random_check_scene(20, 3, 16, seed).unwrap();
        let report = check_render_gradients(&scene, &cam, [0.2, 0.3, 0.4], seed, tol).unwrap();
        pass &= report.all_passed() && report.groups.iter().all(|g| g.checked > 0);
        checked += report.checked();
        excluded += report.excluded();
        worst = report.groups.iter().map(|g| g.worst_rel_error).fold(worst, f64::max);
    }
    parts.push(format!("render: {checked} coords, {excluded} excluded, worst rel {worst:.1e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (w, h) = (16, 16);
    let render = random_image(w, h, 3, &mut rng);
    let target = random_image(w, h, 3, &mut rng);
    let (_, grad) = reconstruction_loss(&render, &target, 0.2).unwrap();
    let (c, p, wr) = fd_check(
        &tol,
        render.data.len(),
        |k| grad.data[k],
        |k, d| {
            let mut r = render.clone();
            r.data[k] += d;
            reconstruction_loss(&r, &target, 0.2).unwrap().0
        },
        |k| (render.data[k] - target.data[k]).abs() <= tol.step,
    );
    pass &= c == p && c > 0;
    parts.push(format!("L_rec {p}/{c} (rel {wr:.1e})"));

    let classes = 8;
    let feat = Image::from_data(w, h, IDENTITY_DIM, (0..w * h * IDENTITY_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let classifier = random_classifier(classes, &mut rng);
    let mask = MaskMap::from_ids(w, h, (0..w * h).map(|_| rng.random_range(0..=classes as u32)).collect()).unwrap();
    let out = identity_2d_loss(&feat, &classifier, &mask).unwrap();
    let loss_2d = |f: &Image, cl: &Classifier| identity_2d_loss(f, cl, &mask).unwrap().loss;
    let (c1, p1, w1) = fd_check(
        &tol,
        feat.data.len(),
        |k| out.d_identity.data[k],
        |k, d| {
            let mut f = feat.clone();
            f.data[k] += d;
            loss_2d(&f, &classifier)
        },
        |_| false,
    );
    let nw = classifier.weights.len();
    let (c2, p2, w2) = fd_check(
        &tol,
        nw + classes,
        |k| if k < nw { out.d_classifier.weights[k] } else { out.d_classifier.bias[k - nw] },
        |k, d| {
            let mut cl = classifier.clone();
            if k < nw {
                cl.weights[k] += d;
            } else {
                cl.bias[k - nw] += d;
            }
            loss_2d(&feat, &cl)
        },
        |_| false,
    );
    pass &= c1 == p1 && c2 == p2;
    parts.push(format!("L_2d {}/{} (rel {:.1e})", p1 + p2, c1 + c2, w1.max(w2)));

    let (mut scene, _) = random_check_scene(20, 0, 8, 5).unwrap();
    for g in scene.gaussians.iter_mut() {
        g.identity = [0; IDENTITY_DIM].map(|_| rng.random_range(-1.0..1.0));
    }
    let cfg = Identity3dConfig { k: 5, m: 30, ..Identity3dConfig::default() };
    let out = identity_3d_loss(&scene, &classifier, &cfg, 9).unwrap();
    let (c3, p3, w3) = fd_check(
        &tol,
        scene.len() * IDENTITY_DIM,
        |k| out.d_identity[k / IDENTITY_DIM][k % IDENTITY_DIM],
        |k, d| {
            let mut s = scene.clone();
            s.gaussians[k / IDENTITY_DIM].identity[k % IDENTITY_DIM] += d;
            identity_3d_loss(&s, &classifier, &cfg, 9).unwrap().loss
        },
        |_| false,
    );
    let (c4, p4, w4) = fd_check(
        &tol,
        nw + classes,
        |k| if k < nw { out.d_classifier.weights[k] } else { out.d_classifier.bias[k - nw] },
        |k, d| {
            let mut cl = classifier.clone();
            if k < nw {
                cl.weights[k] += d;
            } else {
                cl.bias[k - nw] += d;
            }
            identity_3d_loss(&scene, &cl, &cfg, 9).unwrap().loss
        },
        |_| false,
    );
    pass &= c3 == p3 && c4 == p4;
    parts.push(format!("L_3d {}/{} (rel {:.1e})", p3 + p4, c3 + c4, w3.max(w4)));
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------- criterion 2

/// Sequential per-pixel front-to-back compositing.
fn composite_naive(scene: &Scene, cam: &Camera, bg: [f64; 3]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let center = cam.center();
    let mut splats = Vec::new();
    for (i, g) in scene.gaussians.iter().enumerate() {
        if let Some(p) = project_gaussian(g, i, cam).unwrap() {
            let dir: Vec<f64> = (0..3).map(|a| g.position[a] - center[a]).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let color = sh::eval_color(scene.sh_degree, &g.sh, [dir[0] / n, dir[1] / n, dir[2] / n]);
            splats.push((p, color.map(|c| c.clamp(0.0, 1.0)), g.opacity(), g.identity));
        }
    }
    splats.sort_by(|a, b| a.0.depth.total_cmp(&b.0.depth).then(a.0.gaussian_index.cmp(&b.0.gaussian_index)));
    let (w, h) = (cam.width, cam.height);
    let (mut color, mut ident, mut trans) = (vec![0.0; w * h * 3], vec![0.0; w * h * IDENTITY_DIM], vec![1.0; w * h]);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let idx = y * w + x;
            let mut t = 1.0;
            for (p, c, o, e) in &splats {
                let r = p.radius as f64;
                if (px - p.mean2d[0]).abs() > r || (py - p.mean2d[1]).abs() > r {
                    continue;
                }
                let (dx, dy) = (px - p.mean2d[0], py - p.mean2d[1]);
                let power = -0.5 * (p.conic[0] * dx * dx + p.conic[2] * dy * dy) - p.conic[1] * dx * dy;
                let a = o * power.exp();
                if power > 0.0 || a < ALPHA_MIN {
                    continue;
                }
                let a = a.min(ALPHA_MAX);
                for k in 0..3 {
                    color[idx * 3 + k] += c[k] * a * t;
                }
                for k in 0..IDENTITY_DIM {
                    ident[idx * IDENTITY_DIM + k] += e[k] * a * t;
                }
                t *= 1.0 - a;
                if t < TRANSMITTANCE_MIN {
                    break;
                }
            }
            for k in 0..3 {
                color[idx * 3 + k] += bg[k] * t;
            }
            trans[idx] = t;
        }
    }
    (color, ident, trans)
}

fn random_scene(rng: &mut ChaCha8Rng) -> (Scene, Camera, [f64; 3]) {
    let deg = rng.random_range(0..=3);
    let cfg = InitConfig { sh_degree: deg, ..InitConfig::default() };
    let n = rng.random_range(1..60);
    let gaussians = (0..n)
        .map(|_| {
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let mut g = seed_gaussian(p, [0.5; 3], 0.1, &cfg, rng);
            g.log_scale = [0; 3].map(|_| rng.random_range(-3.5..-1.0));
            g.rotation = [0; 4].map(|_| rng.random_range(-1.0..1.0));
            g.opacity_logit = rng.random_range(-3.0..5.0);
            g.sh.iter_mut().for_each(|c| *c = [0; 3].map(|_| rng.random_range(-1.0..1.0)));
            g.identity = [0; IDENTITY_DIM].map(|_| rng.random_range(-1.0..1.0));
            g
        })
        .collect();
    let scene = Scene { gaussians, classifier: Classifier::zeros(4), sh_degree: deg, metadata: SceneMetadata::default() };
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    let eye = [3.0 * a.cos(), rng.random_range(-1.5..1.5), 3.0 * a.sin()];
    let (w, h) = (rng.random_range(8..48), rng.random_range(8..48));
    let cam = Camera::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], w, h, rng.random_range(10.0..60.0)).unwrap();
    (scene, cam, [0; 3].map(|_| rng.random_range(0.0..1.0)))
}

fn blending_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (scene, cam, bg) = random_scene(&mut rng);
        let out = render_forward(&scene, &cam, &RenderConfig { background: bg, trace_branches: false }).unwrap();
        let (c, e, t) = composite_naive(&scene, &cam, bg);
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(diff(&out.color.data, &c)).max(diff(&out.identity.data, &e)).max(diff(&out.final_transmittance, &t));
    }
    outcome(worst <= 1e-6, format!("100 scenes, max |tiled - sequential| = {worst:.2e} (tol 1e-6)"))
}

// ---------------------------------------------------------------- criterion 3

fn direct_kl_loss(scene: &Scene, classifier: &Classifier, samples: &[usize], k: usize) -> (f64, Vec<Vec<usize>>) {
    let probs: Vec<Vec<f64>> = scene
        .gaussians
        .iter()
        .map(|g| {
            let z: Vec<f64> = (0..classifier.classes)
                .map(|c| classifier.bias[c] + (0..IDENTITY_DIM).map(|d| classifier.weights[d * classifier.classes + c] * g.identity[d]).sum::<f64>())
                .collect();
            let s: f64 = z.iter().map(|v| v.exp()).sum();
            z.iter().map(|v| v.exp() / s).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut all = Vec::new();
    for &j in samples {
        let pj = scene.gaussians[j].position;
        let mut others: Vec<(f64, usize)> = (0..scene.len())
            .filter(|&i| i != j)
            .map(|i| {
                let p = scene.gaussians[i].position;
                ((0..3).map(|a| (p[a] - pj[a]).powi(2)).sum(), i)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nb: Vec<usize> = others[..k].iter().map(|o| o.1).collect();
        for &i in &nb {
            total += (0..classifier.classes).map(|c| probs[j][c] * (probs[j][c] / probs[i][c]).ln()).sum::<f64>();
        }
        all.push(nb);
    }
    (total / (samples.len() * k) as f64, all)
}

fn hand_scene(positions: &[[f64; 3]], identities: &[[f64; 2]]) -> Scene {
    let gaussians = positions
        .iter()
        .zip(identities)
        .map(|(p, e)| {
            let mut id = [0.0; IDENTITY_DIM];
            id[0] = e[0];
            id[1] = e[1];
            Gaussian { position: *p, log_scale: [-2.0; 3], rotation: [1.0, 0.0, 0.0, 0.0], opacity_logit: 0.0, sh: vec![[0.0; 3]], identity: id }
        })
        .collect();
    Scene { gaussians, classifier: Classifier::zeros(3), sh_degree: 0, metadata: SceneMetadata::default() }
}

fn regularizer_oracle() -> Outcome {
    let mut classifier = Classifier::zeros(3);
    classifier.weights[0] = 1.0; // d0 -> c0
    classifier.weights[3 + 1] = 1.5; // d1 -> c1
    classifier.weights[2] = -0.5; // d0 -> c2
    classifier.bias = vec![0.1, -0.2, 0.3];
    let cases = [
        hand_scene(&[[0.0; 3], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]], &[[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]]),
        hand_scene(
            &[[0.0; 3], [0.0, 1.0, 0.0], [0.0, 0.0, 2.5], [1.5, 1.5, 0.0], [-0.7, 0.2, 0.4]],
            &[[2.0, -1.0], [0.3, 0.3], [-1.0, 1.0], [0.0, 0.0], [1.2, 0.7]],
        ),
        hand_scene(&[[0.0; 3], [2.0, 0.0, 0.0], [4.0, 0.0, 0.0], [6.0, 0.0, 0.0]], &[[0.5, 0.5], [0.5, 0.5], [-3.0, 2.0], [0.1, 0.0]]),
    ];
    let mut worst = 0.0f64;
    let mut neighbors_ok = true;
    for (n, scene) in cases.iter().enumerate() {
        for k in 1..scene.len() {
            let cfg = Identity3dConfig { k, m: 7, ..Identity3dConfig::default() };
            let out = identity_3d_loss(scene, &classifier, &cfg, n as u64 * 10 + k as u64).unwrap();
            let (direct, nb) = direct_kl_loss(scene, &classifier, &out.samples, k);
            neighbors_ok &= nb == out.neighbors;
            worst = worst.max((out.loss - direct).abs());
        }
    }
    let same = hand_scene(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]], &[[0.4, -0.9]; 4]);
    let zero = identity_3d_loss(&same, &classifier, &Identity3dConfig { k: 3, m: 10, ..Default::default() }, 1).unwrap().loss;
    outcome(
        worst <= 1e-10 && zero == 0.0 && neighbors_ok,
        format!("max |loss - direct| = {worst:.1e} (tol 1e-10), identical encodings -> {zero}, neighbors match brute force: {neighbors_ok}"),
    )
}

// ---------------------------------------------------------------- criterion 4

const E2E_SEED: u64 = 7;
const E2E_CLASSES: usize = 256;

struct Trained {
    data: SynthOutput,
    spec: SynthSpec,
    config: TrainConfig,
    train_masks: Vec<MaskMap>,
    scene: Scene,
    seconds: f64,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let spec = SynthSpec::ring_of_blobs(3);
        let data = synth_scene(&spec, E2E_SEED).unwrap();
        let train_masks = data.train.masks.clone();
        let init = InitConfig { sh_degree: spec.sh_degree, classes: E2E_CLASSES, ..InitConfig::default() };
        let config = TrainConfig { seed: E2E_SEED, ..synth_train_config(&spec) };
        let scene0 = init_scene(&data.points, &init, E2E_SEED).unwrap();
        let views: Vec<TrainView> = data
            .train
            .cameras
            .iter()
            .zip(&data.train.images)
            .zip(&train_masks)
            .map(|((c, i), m)| TrainView::new(c.clone(), i.clone(), Some(m.clone())))
            .collect();
        let (scene, _) = train(scene0, &views, &config).unwrap();
        Trained { data, spec, config, train_masks, scene, seconds: start.elapsed().as_secs_f64() }
    })
}

fn end_to_end() -> Outcome {
    let t = trained();
    let bg = t.config.background;
    let test = &t.data.test;
    let mut psnr_sum = 0.0;
    let mut pred = Vec::new();
    for (cam, img) in test.cameras.iter().zip(&test.images) {
        let out = render_forward(&t.scene, cam, &RenderConfig { background: bg, trace_branches: false }).unwrap();
        psnr_sum += psnr(&out.color, img).unwrap();
        pred.push(segment_view(&t.scene, cam, bg).unwrap());
    }
    let p = psnr_sum / test.cameras.len() as f64;
    let seg = segmentation_scores(&pred, &test.masks).unwrap();
    let pass = p >= 30.0 && seg.miou >= 0.90 && seg.mbiou >= 0.80 && t.seconds <= 600.0;
    outcome(
        pass,
        format!(
            "held-out PSNR {p:.2} dB (>= 30), mIoU {:.3} (>= 0.90), mBIoU {:.3} (>= 0.80), {} Gaussians, {} iterations, train {:.0} s (<= 600)",
            seg.miou,
            seg.mbiou,
            t.scene.len(),
            t.config.iterations,
            t.seconds
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

struct NestedScene {
    scene: Scene,
    /// 0 = shell, 1 = interior (same object), 2 = other object.
    part: Vec<u8>,
}

fn nested_shell_scene(seed: u64) -> NestedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = InitConfig { sh_degree: 0, classes: 2, ..InitConfig::default() };
    let mut gaussians = Vec::new();
    let mut part = Vec::new();
    let mut add = |center: [f64; 3], r0: f64, r1: f64, count: usize, scale: f64, color: [f64; 3], blob: usize, tag: u8, rng: &mut ChaCha8Rng| {
        for _ in 0..count {
            let dir: [f64; 3] = rand_distr::Distribution::sample(&rand_distr::UnitSphere, rng);
            let r = (r0.powi(3) + rng.random_range(0.0..1.0) * (r1.powi(3) - r0.powi(3))).cbrt();
            let p = [0, 1, 2].map(|k| center[k] + r * dir[k]);
            let mut g = seed_gaussian(p, color, scale, &cfg, rng);
            g.opacity_logit = splatgroup::scene::logit(0.99);
            g.identity = blob_identity(blob);
            gaussians.push(g);
            part.push(tag);
        }
    };
    add([0.0; 3], 0.42, 0.5, 3000, 0.1, [0.8, 0.3, 0.2], 0, 0, &mut rng);
    add([0.0; 3], 0.0, 0.40, 250, 0.05, [0.2, 0.3, 0.8], 0, 1, &mut rng);
    add([0.0, 0.0, 1.6], 0.0, 0.6, 500, 0.08, [0.2, 0.7, 0.3], 1, 2, &mut rng);
    let mut classifier = Classifier::zeros(2);
    classifier.weights[0] = 1.0;
    classifier.weights[3] = 1.0;
    NestedScene { scene: Scene { gaussians, classifier, sh_degree: 0, metadata: SceneMetadata::default() }, part }
}

fn ring_cameras(n: usize, radius: f64, size: usize, focal: f64, target: [f64; 3]) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let a = i as f64 / n as f64 * std::f64::consts::TAU;
            let eye = [target[0] + radius * a.cos(), -1.2, target[2] + radius * a.sin()];
            Camera::look_at(eye, target, [0.0, -1.0, 0.0], size, size, focal).unwrap()
        })
        .collect()
}

fn mask_of(scene: &Scene, cam: &Camera, bg: [f64; 3]) -> MaskMap {
    segment_view(scene, cam, bg).unwrap()
}

struct AblationRun {
    interior_correct: f64,
    residue: f64,
}

fn ablation_run(gt: &NestedScene, views: &[TrainView], lambda_3d: f64, seed: u64) -> AblationRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = gt.scene.clone();
    let normal = rand_distr::Normal::new(0.0, 0.01).unwrap();
    for g in scene.gaussians.iter_mut() {
        g.identity = [0; IDENTITY_DIM].map(|_| rand_distr::Distribution::sample(&normal, &mut rng));
    }
    scene.classifier = Classifier::random(16, &mut rng);
    let config = TrainConfig {
        iterations: 1500,
        lambda_3d,
        densify: false,
        opacity_reset_interval: 0,
        background: [0.5; 3],
        seed,
        ..TrainConfig::default()
    };
    let freeze = Freeze { gaussians: None, groups: [ParamGroup::Sh, ParamGroup::Identity].into_iter().collect(), classifier: true };
    let mut trainer = Trainer::with_options(scene, views, config, freeze, LossMode::Reconstruction).unwrap();
    trainer.run(|_| {}).unwrap();
    let scene = trainer.scene;
    let labels = classify_gaussians(&scene).labels;
    let interior: Vec<usize> = (0..scene.len()).filter(|&i| gt.part[i] == 1).collect();
    let interior_correct = interior.iter().filter(|&&i| labels[i] == 0).count() as f64 / interior.len() as f64;

    // Object pixels still covered once everything labeled as the shell is gone.
    let left: Vec<usize> = (0..scene.len()).filter(|&i| gt.part[i] != 2 && labels[i] != 0).collect();
    let leftover = scene.select(left);
    let cfg = RenderConfig { background: [0.5; 3], trace_branches: false };
    let (mut covered, mut object) = (0usize, 0usize);
    for v in views {
        let region = v.mask.as_ref().unwrap().binary(1);
        object += region.iter().filter(|&&r| r).count();
        if !leftover.is_empty() {
            let alpha = render_forward(&leftover, &v.camera, &cfg).unwrap().alpha();
            covered += region.iter().zip(&alpha).filter(|(&r, &a)| r && a > 0.5).count();
        }
    }
    AblationRun { interior_correct, residue: covered as f64 / object as f64 }
}

fn ablation() -> Outcome {
    let gt = nested_shell_scene(5);
    let bg = [0.5; 3];
    let cams = ring_cameras(12, 3.2, 64, 70.0, [0.0, 0.0, 0.8]);
    let without_interior = gt.scene.select((0..gt.scene.len()).filter(|&i| gt.part[i] != 1));
    let cfg = RenderConfig { background: bg, trace_branches: false };
    let mut leaking = 0;
    let mut views = Vec::new();
    for cam in &cams {
        let full = render_forward(&gt.scene, cam, &cfg).unwrap();
        let hollow = render_forward(&without_interior, cam, &cfg).unwrap();
        leaking += full.identity.data.chunks(IDENTITY_DIM).zip(hollow.identity.data.chunks(IDENTITY_DIM)).filter(|(a, b)| a != b).count();
        views.push(TrainView::new(cam.clone(), full.color, Some(mask_of(&gt.scene, cam, bg))));
    }
    let with = ablation_run(&gt, &views, 2.0, 11);
    let without = ablation_run(&gt, &views, 0.0, 11);
    let occluded = leaking == 0;
    let pass = occluded
        && with.interior_correct > without.interior_correct
        && with.residue <= 0.05
        && without.residue >= 0.20;
    outcome(
        pass,
        format!(
            "interior hidden in all views: {occluded} ({leaking} px differ); correct interior labels {:.1}% (λ3d=2) vs {:.1}% (λ3d=0); \
             object area left after removing the shell label {:.1}% (<= 5%) vs {:.1}% (>= 20%)",
            100.0 * with.interior_correct,
            100.0 * without.interior_correct,
            100.0 * with.residue,
            100.0 * without.residue
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn label_area(scene: &Scene, cams: &[Camera], bg: [f64; 3], label: usize) -> usize {
    cams.iter().map(|c| mask_of(scene, c, bg).area(label as u32 + 1)).sum()
}

fn translated_pair_scene() -> (Scene, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = InitConfig { sh_degree: 2, classes: 2, ..InitConfig::default() };
    let mut a = Vec::new();
    for _ in 0..150 {
        let dir: [f64; 3] = rand_distr::Distribution::sample(&rand_distr::UnitSphere, &mut rng);
        let r = 0.3 * rng.random_range(0.0f64..1.0).cbrt();
        let mut g = seed_gaussian([-0.7 + r * dir[0], r * dir[1], r * dir[2]], [0.85, 0.25, 0.2], 0.07, &cfg, &mut rng);
        g.opacity_logit = splatgroup::scene::logit(0.9);
        g.rotation = [0; 4].map(|_| rng.random_range(-1.0..1.0));
        g.log_scale = [0; 3].map(|_| (0.07f64).ln() + rng.random_range(-0.3..0.3));
        g.identity = blob_identity(0);
        a.push(g);
    }
    let mut b: Vec<Gaussian> = a.clone();
    for g in b.iter_mut() {
        g.position[0] += 1.4;
        g.sh[0] = [0.2, 0.7, 0.3].map(sh::rgb_to_dc);
        g.identity = blob_identity(1);
    }
    let mut classifier = Classifier::zeros(2);
    classifier.weights[0] = 1.0;
    classifier.weights[3] = 1.0;
    let n = a.len();
    let mut gaussians = a;
    gaussians.extend(b);
    let scene = Scene { gaussians, classifier, sh_degree: 2, metadata: SceneMetadata::default() };
    (scene, (0..n).collect(), (n..2 * n).collect())
}

fn mean_abs(a: &Image, b: &Image, keep: impl Fn(usize) -> bool) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for p in 0..a.pixel_count() {
        if keep(p) {
            for c in 0..3 {
                sum += (a.data[p * 3 + c] - b.data[p * 3 + c]).abs();
            }
            count += 3;
        }
    }
    (if count == 0 { 0.0 } else { sum / count as f64 }, count)
}

fn editing() -> Outcome {
    let t = trained();
    let bg = t.config.background;
    let rc = RenderConfig { background: bg, trace_branches: false };
    let mut cams = t.data.train.cameras.clone();
    cams.extend(t.data.test.cameras.iter().cloned());
    let mut parts = Vec::new();

    let labels: BTreeSet<usize> = classify_gaussians(&t.scene).labels.into_iter().collect();
    let mut worst_ratio = 0.0f64;
    for id in 0..t.spec.blobs.len() {
        if !labels.contains(&id) {
            worst_ratio = f64::INFINITY;
            continue;
        }
        let before = label_area(&t.scene, &cams, bg, id);
        let removed = remove_group(&t.scene, id, false).unwrap();
        let after = label_area(&removed, &cams, bg, id);
        worst_ratio = worst_ratio.max(after as f64 / before.max(1) as f64);
    }
    let remove_ok = worst_ratio < 0.01;
    parts.push(format!("removal leaves {:.2}% of mask area (< 1%)", 100.0 * worst_ratio));

    let (sym, ia, ib) = translated_pair_scene();
    let swapped = recompose_swap(&sym, 0, 1).unwrap();
    let mut reference = sym.clone();
    for (&i, &j) in ia.iter().zip(&ib) {
        let (si, sj) = (sym.gaussians[i].sh.clone(), sym.gaussians[j].sh.clone());
        reference.gaussians[i].sh = sj;
        reference.gaussians[j].sh = si;
    }
    let sym_cam = Camera::look_at([0.0, -1.0, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 64, 64, 70.0).unwrap();
    let a = render_forward(&swapped, &sym_cam, &rc).unwrap().color;
    let b = render_forward(&reference, &sym_cam, &rc).unwrap().color;
    let (swap_err, _) = mean_abs(&a, &b, |_| true);
    let swap_ok = swap_err <= 2.0 / 255.0;
    parts.push(format!("swap vs color-swapped reference {:.2e} (<= {:.2e})", swap_err, 2.0 / 255.0));

    let target_id = 0u32;
    let views: Vec<TrainView> = t
        .data
        .train
        .cameras
        .iter()
        .zip(&t.train_masks)
        .map(|(cam, m)| {
            let mut img = render_forward(&t.scene, cam, &rc).unwrap().color;
            let region = m.binary(target_id + 1);
            for (p, &inside) in region.iter().enumerate() {
                if inside {
                    let px = &mut img.data[p * 3..p * 3 + 3];
                    let (r, g, b) = (px[0], px[1], px[2]);
                    px.copy_from_slice(&[b, r, g]);
                }
            }
            TrainView { camera: cam.clone(), image: img, mask: None, region: Some(region) }
        })
        .collect();
    let ft = FinetuneConfig { iterations: 300, train: t.config.clone(), ..FinetuneConfig::default() };
    let unfreeze: BTreeSet<ParamGroup> = [ParamGroup::Sh].into_iter().collect();
    let tuned = finetune_group(&t.scene, target_id as usize, &unfreeze, &views, &ft).unwrap();
    let (mut outside_sum, mut outside_n, mut inside_psnr) = (0.0, 0usize, 0.0);
    for v in &views {
        let before = render_forward(&t.scene, &v.camera, &rc).unwrap().color;
        let after = render_forward(&tuned, &v.camera, &rc).unwrap().color;
        let region = v.region.as_ref().unwrap();
        let (m, n) = mean_abs(&before, &after, |p| !region[p]);
        outside_sum += m * n as f64;
        outside_n += n;
        let (mse, n) = {
            let mut s = 0.0;
            let mut n = 0;
            for p in (0..region.len()).filter(|&p| region[p]) {
                for c in 0..3 {
                    s += (after.data[p * 3 + c] - v.image.data[p * 3 + c]).powi(2);
                }
                n += 3;
            }
            (s / n.max(1) as f64, n)
        };
        if n > 0 {
            inside_psnr += 10.0 * (1.0 / mse.max(1e-10)).log10() / views.len() as f64;
        }
    }
    let outside = outside_sum / outside_n as f64;
    let finetune_ok = outside <= 1.0 / 255.0;
    parts.push(format!("sh fine-tune outside change {:.2e} (<= {:.2e}), inside PSNR {inside_psnr:.1} dB", outside, 1.0 / 255.0));

    let ab = remove_group(&recolor_constant(&t.scene, 1, [0.9, 0.9, 0.9]).unwrap(), 0, false).unwrap();
    let ba = recolor_constant(&remove_group(&t.scene, 0, false).unwrap(), 1, [0.9, 0.9, 0.9]).unwrap();
    let cd = recompose_swap(&recolor_constant(&t.scene, 0, [0.1, 0.2, 0.3]).unwrap(), 1, 2).unwrap();
    let dc = recolor_constant(&recompose_swap(&t.scene, 1, 2).unwrap(), 0, [0.1, 0.2, 0.3]).unwrap();
    let commute_ok = ab == ba
        && cd == dc
        && render_forward(&ab, &cams[0], &rc).unwrap().color == render_forward(&ba, &cams[0], &rc).unwrap().color;
    parts.push(format!("disjoint edits commute bit-exactly: {commute_ok}"));

    outcome(remove_ok && swap_ok && finetune_ok && commute_ok, parts.join("; "))
}

// ---------------------------------------------------------------- criterion 7

fn determinism() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    let spec = SynthSpec { image_size: 32, focal: 35.0, train_views: 6, test_views: 2, ..SynthSpec::ring_of_blobs(2) };
    let run = || {
        pool.install(|| {
            let data = synth_scene(&spec, 21).unwrap();
            let init = InitConfig { classes: 8, ..InitConfig::default() };
            let scene = init_scene(&data.points, &init, 21).unwrap();
            let views: Vec<TrainView> = data
                .train
                .cameras
                .iter()
                .zip(&data.train.images)
                .zip(&data.train.masks)
                .map(|((c, i), m)| TrainView::new(c.clone(), i.clone(), Some(m.clone())))
                .collect();
            let config = TrainConfig {
                iterations: 300,
                densify_from: 100,
                densify_interval: 50,
                opacity_reset_interval: 200,
                seed: 21,
                ..synth_train_config(&spec)
            };
            let (trained, log) = train(scene, &views, &config).unwrap();
            let render = render_forward(&trained, &data.test.cameras[0], &RenderConfig::default()).unwrap();
            (data.scene, data.train.images, data.train.masks, trained, log, render.color, render.identity)
        })
    };
    let a = run();
    let b = run();
    let synth_ok = a.0 == b.0 && a.1 == b.1 && a.2 == b.2;
    let train_ok = a.3 == b.3 && a.4 == b.4;
    let render_ok = a.5 == b.5 && a.6 == b.6;
    outcome(
        synth_ok && train_ok && render_ok,
        format!(
            "2 threads, two runs: synth identical {synth_ok}, train identical {train_ok} ({} Gaussians), render identical {render_ok}",
            a.3.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn cli(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_splatgroup")).args(args).output().unwrap();
    (out.status.success(), String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr))
}

fn png_count(dir: &Path) -> usize {
    std::fs::read_dir(dir).map_or(0, |d| d.filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count())
}

fn formats() -> Outcome {
    let mut parts = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let t = trained();
    let a = dir.path().join("a.ply");
    let b = dir.path().join("b.ply");
    save_scene(&t.scene, &a).unwrap();
    let loaded = load_scene(&a).unwrap();
    save_scene(&loaded, &b).unwrap();
    let ply_ok = loaded == t.scene && std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    parts.push(format!("PLY round trip bit-exact {ply_ok}"));

    let root = dir.path().join("run");
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let mut steps: Vec<(&str, bool)> = Vec::new();
    let mut log = String::new();
    let mut step = |name: &'static str, args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let (ok, out) = cli(&refs);
        if !ok {
            log += &format!("{name}: {out}");
        }
        steps.push((name, ok));
    };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    step("synth", s(&["synth", "--out", &p(""), "--seed", "3", "--size", "32", "--train-views", "6", "--test-views", "2"]));
    step("associate", s(&["associate", "--input", &p("train/masks_raw"), "--output", &p("train/masks")]));
    step(
        "train",
        s(&[
            "train", "--data", &p("train"), "--points", &p("points.ply"), "--config", &p("train_config.json"), "--iters", "200",
            "--classes", "8", "--out", &p("scene.ply"), "--log", &p("train.jsonl"), "--seed", "3",
        ]),
    );
    step("segment", s(&["segment", "--scene", &p("scene.ply"), "--data", &p("test"), "--out", &p("seg"), "--config", &p("train_config.json")]));
    let present: Vec<usize> = load_scene(&root.join("scene.ply"))
        .map(|sc| classify_gaussians(&sc).labels.into_iter().collect::<BTreeSet<_>>().into_iter().collect())
        .unwrap_or_default();
    let script = serde_json::json!({"operations": [
        {"kind": "recolor", "id": present.first().copied().unwrap_or(0), "color": [1.0, 1.0, 0.0]},
        {"kind": "remove", "id": present.last().copied().unwrap_or(0)}
    ]});
    std::fs::write(root.join("edit.json"), script.to_string()).unwrap();
    step("edit", s(&["edit", "--scene", &p("scene.ply"), "--script", &p("edit.json"), "--out", &p("edited.ply")]));
    step("eval", s(&["eval", "--gt", &p("test"), "--scene", &p("edited.ply"), "--out", &p("eval.csv"), "--config", &p("train_config.json")]));
    let exits_ok = steps.iter().all(|s| s.1);
    parts.push(format!(
        "CLI exits 0: {}",
        steps.iter().map(|(n, ok)| format!("{n}={}", if *ok { "ok" } else { "FAILED" })).collect::<Vec<_>>().join(" ")
    ));

    let log_ok = std::fs::read_to_string(root.join("train.jsonl")).is_ok_and(|text| {
        let lines: Vec<&str> = text.lines().collect();
        lines.len() == 2
            && lines.iter().all(|l| {
                serde_json::from_str::<serde_json::Value>(l).is_ok_and(|v| {
                    ["iteration", "l_rec", "l_2d", "l_3d", "gaussian_count"].iter().all(|k| v.get(k).is_some_and(|x| x.is_number()))
                })
            })
    });
    let scenes_ok = load_scene(&root.join("scene.ply")).is_ok() && load_scene(&root.join("edited.ply")).is_ok();
    let seg_ok = png_count(&root.join("seg/ids")) == 2
        && png_count(&root.join("seg/pca")) == 2
        && image::open(root.join("seg/ids/000.png")).is_ok_and(|i| i.color() == image::ColorType::L16)
        && image::open(root.join("seg/pca/000.png")).is_ok_and(|i| i.color() == image::ColorType::Rgb8);
    let csv_ok = std::fs::read_to_string(root.join("eval.csv")).is_ok_and(|text| {
        let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
        rows.len() == 4
            && rows[0] == ["view", "psnr", "ssim", "miou", "mbiou"]
            && rows[1..].iter().all(|r| r.len() == 5 && r[1..].iter().all(|v| v.parse::<f64>().is_ok()))
            && rows[3][0] == "all"
    });
    let assoc_ok = png_count(&root.join("train/masks")) == 6;
    parts.push(format!("artifacts valid: log {log_ok}, scenes {scenes_ok}, id/pca maps {seg_ok}, csv {csv_ok}, masks {assoc_ok}"));
    if !log.is_empty() {
        parts.push(log.trim().replace('\n', " | "));
    }
    outcome(ply_ok && exits_ok && log_ok && scenes_ok && seg_ok && csv_ok && assoc_ok, parts.join("; "))
}
