//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::editor::{apply_script, segment_view, EditScript, FinetuneConfig};
use crate::gradcheck::{check_render_gradients, random_check_scene, Tolerance};
use crate::io::dataset::{load_dataset, read_cameras, read_mask_dir, write_mask, write_rgb, LoadOptions};
use crate::io::metrics::{psnr, segmentation_scores, ssim};
use crate::io::synth::{synth_scene, write_synth, SynthSpec};
use crate::io::{associate_masks_greedy, feature_pca, load_points, load_scene, save_scene, AssociateConfig};
use crate::rasterizer::{render_forward, RenderConfig};
use crate::scene::{init_scene, InitConfig, DEFAULT_CLASSES};
use crate::trainer::{train_logged, TrainConfig};
use crate::{Error, MaskMap, Result};

#[derive(Debug, Parser)]
#[command(name = "splatgroup", version, about = "Gaussian grouping: train, segment and edit splat scenes")]
pub struct Cli {
    /// Seed for every random choice; overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file with training configuration fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic blob dataset.
    Synth(SynthArgs),
    /// Make per-view instance ids consistent across a view sequence.
    Associate(AssociateArgs),
    /// Train a grouped scene.
    Train(TrainArgs),
    /// Render a scene from every camera of a dataset.
    Render(RenderArgs),
    /// Write per-view id maps and identity-feature PCA images.
    Segment(RenderArgs),
    /// Apply an edit script.
    Edit(EditArgs),
    /// Score renders and id maps against a dataset; prints CSV.
    Eval(EvalArgs),
    /// Compare analytic rasterizer gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON scene specification; defaults to a ring of blobs.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub blobs: usize,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub train_views: Option<usize>,
    #[arg(long)]
    pub test_views: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AssociateArgs {
    /// Directory of per-view 16-bit mask PNGs, processed in name order.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    pub iou_threshold: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub min_area_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory with cameras.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Initial point cloud PLY.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    pub points: Option<PathBuf>,
    /// Grouped scene to continue training.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Line-delimited JSON training log (default: stdout).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Classifier channels when initializing from points.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub sh_degree: Option<usize>,
    /// Ignore masks and train reconstruction only.
    #[arg(long)]
    pub no_masks: bool,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args, Default)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lambda_2d: Option<f64>,
    #[arg(long)]
    pub lambda_3d: Option<f64>,
    #[arg(long)]
    pub knn_k: Option<usize>,
    #[arg(long)]
    pub knn_m: Option<usize>,
    /// Any training field as KEY=JSON, e.g. `--set densify=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Directory whose cameras.json lists the views.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub script: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Default fine-tuning iterations for operations that do not set their own.
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth dataset directory (cameras.json, images, masks).
    #[arg(long)]
    pub gt: PathBuf,
    /// Scene to render and segment.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Predicted id maps; overrides segmenting `--scene`.
    #[arg(long)]
    pub pred_masks: Option<PathBuf>,
    /// CSV destination (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub gaussians: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub sh_degree: usize,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    pool.install(|| dispatch(&cli))
}

fn train_config(cli: &Cli, overrides: &ConfigOverrides) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    let o = overrides;
    if let Some(v) = o.iters {
        cfg.iterations = v;
    }
    if let Some(v) = o.lambda_2d {
        cfg.lambda_2d = v;
    }
    if let Some(v) = o.lambda_3d {
        cfg.lambda_3d = v;
    }
    if let Some(v) = o.knn_k {
        cfg.knn_k = v;
    }
    if let Some(v) = o.knn_m {
        cfg.knn_m = v;
    }
    if !o.set.is_empty() {
        let mut value = serde_json::to_value(&cfg)?;
        for kv in &o.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
            let parsed = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
            value[k] = parsed;
        }
        cfg = serde_json::from_value(value)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Synth(a) => {
            let mut spec: SynthSpec = match &a.spec {
                Some(p) => read_json(p)?,
                None => SynthSpec::ring_of_blobs(a.blobs),
            };
            if let Some(s) = a.size {
                spec.image_size = s;
                spec.focal *= s as f64 / 64.0;
            }
            spec.train_views = a.train_views.unwrap_or(spec.train_views);
            spec.test_views = a.test_views.unwrap_or(spec.test_views);
            let out = synth_scene(&spec, seed)?;
            write_synth(&out, &spec, seed, &a.out)?;
        }
        Command::Associate(a) => {
            let views = read_mask_dir(&a.input)?;
            let masks: Vec<MaskMap> = views.iter().map(|(_, m)| m.clone()).collect();
            let cfg = AssociateConfig { iou_threshold: a.iou_threshold, min_area_fraction: a.min_area_fraction };
            create_dir(&a.output)?;
            for ((name, _), m) in views.iter().zip(associate_masks_greedy(&masks, &cfg)) {
                write_mask(&m, &a.output.join(name))?;
            }
        }
        Command::Train(a) => {
            let cfg = train_config(cli, &a.overrides)?;
            let scene = match (&a.scene, &a.points) {
                (Some(s), _) => load_scene(s)?,
                (None, Some(p)) => {
                    let init = InitConfig {
                        classes: a.classes.unwrap_or(DEFAULT_CLASSES),
                        sh_degree: a.sh_degree.unwrap_or(InitConfig::default().sh_degree),
                        ..InitConfig::default()
                    };
                    init_scene(&load_points(p)?, &init, cfg.seed)?
                }
                (None, None) => unreachable!("clap requires one of --scene and --points"),
            };
            let opts = LoadOptions { no_masks: a.no_masks, max_id: Some(scene.classifier.classes as u32) };
            let ds = load_dataset(&a.data, opts)?;
            let views = ds.train_views();
            let mut sink: Box<dyn Write> = match &a.log {
                Some(p) => Box::new(fs::File::create(p).map_err(|e| Error::Io { path: p.clone(), source: e })?),
                None => Box::new(std::io::stdout()),
            };
            let mut write_err = None;
            let (scene, _) = train_logged(scene, &views, &cfg, |rec| {
                if let Err(e) = serde_json::to_string(rec).map(|line| writeln!(sink, "{line}")) {
                    write_err.get_or_insert(e.to_string());
                }
            })?;
            if let Some(e) = write_err {
                anyhow::bail!("writing the training log: {e}");
            }
            save_scene(&scene, &a.out)?;
        }
        Command::Render(a) => {
            let scene = load_scene(&a.scene)?;
            let bg = train_config(cli, &ConfigOverrides::default())?.background;
            create_dir(&a.out)?;
            for (i, rec) in read_cameras(&a.data)?.iter().enumerate() {
                let out = render_forward(&scene, &rec.camera()?, &RenderConfig { background: bg, trace_branches: false })?;
                write_rgb(&out.color, &a.out.join(format!("{i:03}.png")))?;
            }
        }
        Command::Segment(a) => {
            let scene = load_scene(&a.scene)?;
            let bg = train_config(cli, &ConfigOverrides::default())?.background;
            let (ids, pca) = (a.out.join("ids"), a.out.join("pca"));
            create_dir(&ids)?;
            create_dir(&pca)?;
            for (i, rec) in read_cameras(&a.data)?.iter().enumerate() {
                let cam = rec.camera()?;
                let name = format!("{i:03}.png");
                write_mask(&segment_view(&scene, &cam, bg)?, &ids.join(&name))?;
                let out = render_forward(&scene, &cam, &RenderConfig { background: bg, trace_branches: false })?;
                write_rgb(&feature_pca(&out.identity, &out.alpha()), &pca.join(&name))?;
            }
        }
        Command::Edit(a) => {
            let scene = load_scene(&a.scene)?;
            let script: EditScript = read_json(&a.script)?;
            let mut ft = FinetuneConfig { train: train_config(cli, &ConfigOverrides::default())?, ..FinetuneConfig::default() };
            if let Some(n) = a.iters {
                ft.iterations = n;
            }
            let base = a.script.parent().unwrap_or(Path::new("."));
            save_scene(&apply_script(&scene, &script, base, &ft, seed)?, &a.out)?;
        }
        Command::Eval(a) => {
            let csv = evaluate(cli, a)?;
            match &a.out {
                Some(p) => fs::write(p, csv).map_err(|e| Error::Io { path: p.clone(), source: e })?,
                None => print!("{csv}"),
            }
        }
        Command::Gradcheck(a) => {
            let (scene, cam) = random_check_scene(a.gaussians, a.sh_degree, a.size, seed)?;
            let report = check_render_gradients(&scene, &cam, [0.2, 0.3, 0.4], seed, Tolerance::default())?;
            for g in &report.groups {
                println!(
                    "{:<10} checked {:>5} passed {:>5} excluded {:>4} worst_rel {:.3e}",
                    g.group, g.checked, g.passed, g.excluded, g.worst_rel_error
                );
            }
            if !report.all_passed() {
                anyhow::bail!("{} of {} gradient coordinates disagree", report.failed(), report.checked());
            }
        }
    }
    Ok(())
}

/// One CSV row per view plus an `all` row (mean PSNR/SSIM, pooled mIoU/mBIoU).
fn evaluate(cli: &Cli, a: &EvalArgs) -> anyhow::Result<String> {
    let gt = load_dataset(&a.gt, LoadOptions::default())?;
    let scene = a.scene.as_deref().map(load_scene).transpose()?;
    let bg = train_config(cli, &ConfigOverrides::default())?.background;
    let n = gt.cameras.len();

    let mut renders = Vec::new();
    if let Some(s) = &scene {
        for cam in &gt.cameras {
            renders.push(render_forward(s, cam, &RenderConfig { background: bg, trace_branches: false })?.color);
        }
    }
    let pred: Option<Vec<MaskMap>> = match (&a.pred_masks, &scene) {
        (Some(dir), _) => Some(read_mask_dir(dir)?.into_iter().map(|(_, m)| m).collect()),
        (None, Some(s)) => Some(gt.cameras.iter().map(|c| segment_view(s, c, bg)).collect::<Result<_>>()?),
        (None, None) => None,
    };
    let gt_masks: Option<Vec<MaskMap>> = gt.masks.iter().cloned().collect();
    let seg = match (&pred, &gt_masks) {
        (Some(p), Some(g)) => {
            if p.len() != g.len() {
                anyhow::bail!("{} predicted id maps for {} ground-truth views", p.len(), g.len());
            }
            Some((p, g))
        }
        _ => None,
    };
    if renders.is_empty() && seg.is_none() {
        anyhow::bail!("nothing to evaluate: pass --scene or --pred-masks with a masked ground truth");
    }

    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let mut csv = String::from("view,psnr,ssim,miou,mbiou\n");
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for i in 0..n {
        let (p, s) = match renders.get(i) {
            Some(r) => (Some(psnr(r, &gt.images[i])?), Some(ssim(r, &gt.images[i])?)),
            None => (None, None),
        };
        psnr_sum += p.unwrap_or(0.0);
        ssim_sum += s.unwrap_or(0.0);
        let scores = seg.map(|(p, g)| segmentation_scores(&p[i..=i], &g[i..=i])).transpose()?;
        csv += &format!("{i},{},{},{},{}\n", fmt(p), fmt(s), fmt(scores.as_ref().map(|s| s.miou)), fmt(scores.as_ref().map(|s| s.mbiou)));
    }
    let mean = |sum: f64| (!renders.is_empty() && n > 0).then(|| sum / n as f64);
    let pooled = seg.map(|(p, g)| segmentation_scores(p, g)).transpose()?;
    csv += &format!(
        "all,{},{},{},{}\n",
        fmt(mean(psnr_sum)),
        fmt(mean(ssim_sum)),
        fmt(pooled.as_ref().map(|s| s.miou)),
        fmt(pooled.as_ref().map(|s| s.mbiou))
    );
    Ok(csv)
}
