//! Front-to-back alpha compositing of color and identity features, and the
//! analytic backward pass to every Gaussian parameter.
//!
//! Per pixel, splats are visited in global depth order:
//!
//! ```text
//! C += c_i α'_i T,  E += e_i α'_i T,  T *= 1 - α'_i
//! ```
//!
//! with `α'_i = o_i · exp(-½ dᵀ Q d)` clamped to 0.99, contributions under 1/255
//! skipped, and the loop stopping once `T < 1e-4`. The backward pass replays each
//! pixel back to front from the stored final transmittance.
//!
//! Pixels are processed in fixed 16×16 tiles; gradient partials are reduced in
//! tile order so results do not depend on the number of worker threads.

use rayon::prelude::*;

use crate::image::Image;
use crate::projection::{cull_and_sort, project_backward, project_gaussian, Projected2D};
use crate::scene::{Camera, Scene, IDENTITY_DIM};
use crate::sh;
use crate::{Error, Result};

pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const ALPHA_MAX: f64 = 0.99;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub const TILE_SIZE: usize = 16;

/// Per-pixel blend weight of a splat. `None` when the contribution is skipped.
pub fn alpha_at_pixel(p: &Projected2D, pixel: [f64; 2], opacity: f64) -> Option<f64> {
    let (alpha, _, _) = alpha_terms(&p.conic, &p.mean2d, pixel, opacity)?;
    Some(alpha)
}

/// `(α', gaussian falloff, clamped)`.
#[inline]
fn alpha_terms(conic: &[f64; 3], mean: &[f64; 2], pixel: [f64; 2], opacity: f64) -> Option<(f64, f64, bool)> {
    let dx = pixel[0] - mean[0];
    let dy = pixel[1] - mean[1];
    let power = -0.5 * (conic[0] * dx * dx + conic[2] * dy * dy) - conic[1] * dx * dy;
    if power > 0.0 {
        return None;
    }
    let falloff = power.exp();
    let raw = opacity * falloff;
    if raw < ALPHA_MIN {
        return None;
    }
    if raw > ALPHA_MAX {
        Some((ALPHA_MAX, falloff, true))
    } else {
        Some((raw, falloff, false))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub background: [f64; 3],
    /// Record a hash of every discrete branch taken (used by gradient checks).
    pub trace_branches: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { background: [0.0; 3], trace_branches: false }
    }
}

/// A projected splat with its activated appearance for one view.
#[derive(Debug, Clone)]
pub struct Splat {
    pub proj: Projected2D,
    pub opacity: f64,
    /// Color after clamping to [0, 1].
    pub color: [f64; 3],
    /// Channels where the SH color was inside [0, 1] (gradient passes).
    pub color_live: [bool; 3],
    /// Unit direction from the camera center to the Gaussian.
    pub view_dir: [f64; 3],
    pub view_dist: f64,
}

#[derive(Debug, Clone)]
pub struct Replay {
    /// Visible splats in depth order.
    pub splats: Vec<Splat>,
    /// Positions into `splats` per tile, ascending.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
    pub width: usize,
    pub height: usize,
    /// Per pixel: one past the sorted position of the last blended splat (0 = none).
    pub last_contributor: Vec<u32>,
    scene_len: usize,
    fingerprint: u64,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    pub identity: Image,
    pub final_transmittance: Vec<f64>,
    /// Number of splats blended into each pixel.
    pub contributor_count: Vec<u32>,
    /// Screen radius per Gaussian (0 when culled).
    pub radii: Vec<u32>,
    pub background: [f64; 3],
    pub branch_signature: Option<u64>,
    pub replay: Replay,
}

impl RenderOutput {
    /// Accumulated opacity `1 - T` per pixel.
    pub fn alpha(&self) -> Vec<f64> {
        self.final_transmittance.iter().map(|t| 1.0 - t).collect()
    }
}

/// Per-Gaussian parameter gradients, laid out like [`crate::Gaussian`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub sh: [[f64; 3]; 16],
    pub identity: [f64; IDENTITY_DIM],
}

impl Default for GaussianGrad {
    fn default() -> Self {
        GaussianGrad {
            position: [0.0; 3],
            log_scale: [0.0; 3],
            rotation: [0.0; 4],
            opacity_logit: 0.0,
            sh: [[0.0; 3]; 16],
            identity: [0.0; IDENTITY_DIM],
        }
    }
}

impl GaussianGrad {
    pub fn is_zero(&self) -> bool {
        *self == GaussianGrad::default()
    }
}

#[derive(Debug, Clone)]
pub struct SceneGradients {
    pub gaussians: Vec<GaussianGrad>,
    /// ‖∂L/∂mean2d‖ in normalized device coordinates for this view.
    pub mean2d_grad_norm: Vec<f64>,
    /// Whether each Gaussian was projected into this view.
    pub visible: Vec<bool>,
}

impl SceneGradients {
    pub fn zeros(n: usize) -> Self {
        SceneGradients {
            gaussians: vec![GaussianGrad::default(); n],
            mean2d_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }
}

fn scene_fingerprint(scene: &Scene) -> u64 {
    // FNV-1a over the geometric parameters
    let mut h: u64 = 0xcbf29ce484222325;
    let mut mix = |v: f64| {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x100000001b3);
    };
    for g in &scene.gaussians {
        g.position.iter().chain(&g.log_scale).chain(&g.rotation).for_each(|&v| mix(v));
        mix(g.opacity_logit);
    }
    h
}

fn hash_step(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x100000001b3)
}

/// Projects, shades and depth-sorts the scene for one camera.
fn prepare_splats(scene: &Scene, cam: &Camera) -> Result<(Vec<Splat>, Vec<u32>)> {
    let center = cam.center();
    let projected: Vec<Option<Splat>> = scene
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| -> Result<Option<Splat>> {
            let Some(proj) = project_gaussian(g, i, cam)? else { return Ok(None) };
            let v = [g.position[0] - center.x, g.position[1] - center.y, g.position[2] - center.z];
            let dist = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let dir = v.map(|c| c / dist);
            let raw = sh::eval_color(scene.sh_degree, &g.sh, dir);
            let color = raw.map(|c| c.clamp(0.0, 1.0));
            let color_live = raw.map(|c| (0.0..=1.0).contains(&c));
            Ok(Some(Splat { proj, opacity: g.opacity(), color, color_live, view_dir: dir, view_dist: dist }))
        })
        .collect::<Result<_>>()?;
    let mut radii = vec![0u32; scene.len()];
    let visible: Vec<Splat> = projected.into_iter().flatten().collect();
    for s in &visible {
        radii[s.proj.gaussian_index] = s.proj.radius;
    }
    let projs: Vec<Projected2D> = visible.iter().map(|s| s.proj.clone()).collect();
    let order = cull_and_sort(&projs);
    let mut slots: Vec<Option<Splat>> = visible.into_iter().map(Some).collect();
    let sorted = order.iter().map(|&i| slots[i].take().unwrap()).collect();
    Ok((sorted, radii))
}

fn bin_tiles(splats: &[Splat], width: usize, height: usize) -> (Vec<Vec<u32>>, usize) {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (s, splat) in splats.iter().enumerate() {
        let Some((x0, x1, y0, y1)) = splat.proj.pixel_rect(width, height) else { continue };
        for ty in y0 / TILE_SIZE..=(y1 - 1) / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=(x1 - 1) / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(s as u32);
            }
        }
    }
    (tiles, tiles_x)
}

fn tile_pixels(tile: usize, tiles_x: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
    let (x1, y1) = ((x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

struct PixelResult {
    color: [f64; 3],
    identity: [f64; IDENTITY_DIM],
    transmittance: f64,
    count: u32,
    last: u32,
    signature: u64,
}

fn shade_pixel(
    splats: &[Splat],
    list: &[u32],
    identities: &[[f64; IDENTITY_DIM]],
    x: usize,
    y: usize,
    background: &[f64; 3],
    trace: bool,
) -> PixelResult {
    let pixel = [x as f64 + 0.5, y as f64 + 0.5];
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut identity = [0.0; IDENTITY_DIM];
    let mut count = 0;
    let mut last = 0;
    let mut sig: u64 = 0xcbf29ce484222325;
    for &s in list {
        let sp = &splats[s as usize];
        if !sp.proj.covers(pixel[0], pixel[1]) {
            continue;
        }
        let Some((alpha, _, clamped)) = alpha_terms(&sp.proj.conic, &sp.proj.mean2d, pixel, sp.opacity) else {
            if trace {
                sig = hash_step(sig, (s as u64) << 2 | 1);
            }
            continue;
        };
        if trace {
            sig = hash_step(sig, (s as u64) << 2 | 2 | clamped as u64);
        }
        let w = alpha * t;
        for c in 0..3 {
            color[c] += sp.color[c] * w;
        }
        let e = &identities[sp.proj.gaussian_index];
        for c in 0..IDENTITY_DIM {
            identity[c] += e[c] * w;
        }
        t *= 1.0 - alpha;
        count += 1;
        last = s + 1;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
    for c in 0..3 {
        color[c] += background[c] * t;
    }
    PixelResult { color, identity, transmittance: t, count, last, signature: sig }
}

/// Renders color and identity features for one view.
pub fn render_forward(scene: &Scene, cam: &Camera, config: &RenderConfig) -> Result<RenderOutput> {
    if cam.width == 0 || cam.height == 0 {
        return Err(Error::ZeroSizeImage);
    }
    if scene.is_empty() {
        return Err(Error::InvalidConfig("cannot render an empty scene".into()));
    }
    let (w, h) = (cam.width, cam.height);
    let (splats, radii) = prepare_splats(scene, cam)?;
    let (tiles, tiles_x) = bin_tiles(&splats, w, h);
    let identities: Vec<[f64; IDENTITY_DIM]> = scene.gaussians.iter().map(|g| g.identity).collect();

    let results: Vec<Vec<(usize, PixelResult)>> = tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            tile_pixels(t, tiles_x, w, h)
                .map(|(x, y)| {
                    let r = shade_pixel(&splats, list, &identities, x, y, &config.background, config.trace_branches);
                    (y * w + x, r)
                })
                .collect()
        })
        .collect();

    let mut color = Image::new(w, h, 3);
    let mut identity = Image::new(w, h, IDENTITY_DIM);
    let mut final_transmittance = vec![0.0; w * h];
    let mut contributor_count = vec![0; w * h];
    let mut last_contributor = vec![0; w * h];
    let mut pixel_sigs = vec![0u64; w * h];
    for (idx, r) in results.into_iter().flatten() {
        color.data[idx * 3..idx * 3 + 3].copy_from_slice(&r.color);
        identity.data[idx * IDENTITY_DIM..(idx + 1) * IDENTITY_DIM].copy_from_slice(&r.identity);
        final_transmittance[idx] = r.transmittance;
        contributor_count[idx] = r.count;
        last_contributor[idx] = r.last;
        pixel_sigs[idx] = r.signature;
    }
    let branch_signature = config.trace_branches.then(|| {
        let mut sig = pixel_sigs.iter().fold(0xcbf29ce484222325, |h, &s| hash_step(h, s));
        for (i, &r) in radii.iter().enumerate() {
            sig = hash_step(sig, (i as u64) << 32 | r as u64);
        }
        for s in &splats {
            let live = s.color_live.iter().fold(0u64, |a, &b| a << 1 | b as u64);
            sig = hash_step(sig, (s.proj.gaussian_index as u64) << 3 | live);
        }
        sig
    });
    Ok(RenderOutput {
        color,
        identity,
        final_transmittance,
        contributor_count,
        radii,
        background: config.background,
        branch_signature,
        replay: Replay {
            splats,
            tiles,
            tiles_x,
            width: w,
            height: h,
            last_contributor,
            scene_len: scene.len(),
            fingerprint: scene_fingerprint(scene),
        },
    })
}

/// Screen-space gradients accumulated for one splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    color: [f64; 3],
    identity: [f64; IDENTITY_DIM],
    opacity: f64,
    mean2d: [f64; 2],
    conic: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for c in 0..3 {
            self.color[c] += o.color[c];
            self.conic[c] += o.conic[c];
        }
        for c in 0..IDENTITY_DIM {
            self.identity[c] += o.identity[c];
        }
        self.opacity += o.opacity;
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    replay: &Replay,
    list: &[u32],
    identities: &[[f64; IDENTITY_DIM]],
    x: usize,
    y: usize,
    transmittance: f64,
    background: &[f64; 3],
    d_color: &[f64],
    d_identity: Option<&[f64]>,
    identity_geometry: bool,
    local: &mut [SplatGrad],
) {
    let last = replay.last_contributor[y * replay.width + x];
    if last == 0 {
        return;
    }
    let pixel = [x as f64 + 0.5, y as f64 + 0.5];
    let mut t = transmittance;
    let mut behind_c = *background;
    let mut behind_e = [0.0; IDENTITY_DIM];
    for (slot, &s) in list.iter().enumerate().rev() {
        if s >= last {
            continue;
        }
        let sp = &replay.splats[s as usize];
        if !sp.proj.covers(pixel[0], pixel[1]) {
            continue;
        }
        let Some((alpha, falloff, clamped)) = alpha_terms(&sp.proj.conic, &sp.proj.mean2d, pixel, sp.opacity) else {
            continue;
        };
        let t_before = t / (1.0 - alpha);
        let w = alpha * t_before;
        let g = &mut local[slot];
        let mut d_alpha = 0.0;
        for c in 0..3 {
            g.color[c] += d_color[c] * w;
            d_alpha += (sp.color[c] - behind_c[c]) * d_color[c];
            behind_c[c] = alpha * sp.color[c] + (1.0 - alpha) * behind_c[c];
        }
        if let Some(de) = d_identity {
            let e = &identities[sp.proj.gaussian_index];
            for c in 0..IDENTITY_DIM {
                g.identity[c] += de[c] * w;
                if identity_geometry {
                    d_alpha += (e[c] - behind_e[c]) * de[c];
                }
                behind_e[c] = alpha * e[c] + (1.0 - alpha) * behind_e[c];
            }
        }
        d_alpha *= t_before;
        t = t_before;
        if clamped {
            continue;
        }
        g.opacity += d_alpha * falloff;
        // α = o·exp(power); power = -½(a dx² + c dy²) - b dx dy with d = pixel - mean
        let d_power = d_alpha * alpha;
        let dx = pixel[0] - sp.proj.mean2d[0];
        let dy = pixel[1] - sp.proj.mean2d[1];
        let conic = &sp.proj.conic;
        g.mean2d[0] += d_power * (conic[0] * dx + conic[1] * dy);
        g.mean2d[1] += d_power * (conic[1] * dx + conic[2] * dy);
        g.conic[0] += d_power * (-0.5 * dx * dx);
        g.conic[1] += d_power * (-dx * dy);
        g.conic[2] += d_power * (-0.5 * dy * dy);
    }
}

/// Gradients of `Σ dL/dcolor · color + Σ dL/didentity · identity` with respect to
/// every Gaussian parameter, plus per-view densification statistics.
pub fn render_backward(
    scene: &Scene,
    cam: &Camera,
    forward: &RenderOutput,
    d_color: &Image,
    d_identity: Option<&Image>,
) -> Result<SceneGradients> {
    render_backward_with(scene, cam, forward, d_color, d_identity, true)
}

/// [`render_backward`]; with `identity_geometry` false the identity image's
/// gradient reaches only the identity encodings, not opacity or shape.
pub fn render_backward_with(
    scene: &Scene,
    cam: &Camera,
    forward: &RenderOutput,
    d_color: &Image,
    d_identity: Option<&Image>,
    identity_geometry: bool,
) -> Result<SceneGradients> {
    let replay = &forward.replay;
    let (w, h) = (cam.width, cam.height);
    if replay.scene_len != scene.len() || replay.fingerprint != scene_fingerprint(scene) {
        return Err(Error::ReplayMismatch("scene differs from the rendered one".into()));
    }
    if forward.color.width != w || forward.color.height != h {
        return Err(Error::ReplayMismatch("camera size differs from the rendered one".into()));
    }
    forward.color.check_same_shape(d_color, "color gradient")?;
    if let Some(de) = d_identity {
        forward.identity.check_same_shape(de, "identity gradient")?;
    }
    let identities: Vec<[f64; IDENTITY_DIM]> = scene.gaussians.iter().map(|g| g.identity).collect();
    let n_splats = replay.splats.len();

    // per-tile partials, reduced below in tile order
    let partials: Vec<Vec<SplatGrad>> = replay
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut local = vec![SplatGrad::default(); list.len()];
            if list.is_empty() {
                return local;
            }
            for (x, y) in tile_pixels(t, replay.tiles_x, w, h) {
                let idx = y * w + x;
                backward_pixel(
                    replay,
                    list,
                    &identities,
                    x,
                    y,
                    forward.final_transmittance[idx],
                    &forward.background,
                    &d_color.data[idx * 3..idx * 3 + 3],
                    d_identity.map(|de| &de.data[idx * IDENTITY_DIM..(idx + 1) * IDENTITY_DIM]),
                    identity_geometry,
                    &mut local,
                );
            }
            local
        })
        .collect();
    let mut splat_grads = vec![SplatGrad::default(); n_splats];
    for (list, local) in replay.tiles.iter().zip(&partials) {
        for (&s, g) in list.iter().zip(local) {
            splat_grads[s as usize].add(g);
        }
    }

    let mut out = SceneGradients::zeros(scene.len());
    let per_splat: Vec<(usize, GaussianGrad, f64)> = replay
        .splats
        .par_iter()
        .zip(&splat_grads)
        .map(|(sp, sg)| {
            let i = sp.proj.gaussian_index;
            let g = &scene.gaussians[i];
            let mut grad = GaussianGrad::default();
            let proj = project_backward(g, cam, &sp.proj, sg.mean2d, sg.conic);
            grad.position = proj.position;
            grad.log_scale = proj.log_scale;
            grad.rotation = proj.rotation;
            grad.opacity_logit = sg.opacity * sp.opacity * (1.0 - sp.opacity);
            grad.identity = sg.identity;

            let d_rgb = [0, 1, 2].map(|c| if sp.color_live[c] { sg.color[c] } else { 0.0 });
            let n_coeffs = sh::coeff_count(scene.sh_degree);
            let basis = sh::basis(scene.sh_degree, sp.view_dir);
            for k in 0..n_coeffs {
                for c in 0..3 {
                    grad.sh[k][c] = basis[k] * d_rgb[c];
                }
            }
            if scene.sh_degree > 0 {
                let jac = sh::basis_jacobian(scene.sh_degree, sp.view_dir);
                let mut d_dir = [0.0; 3];
                for k in 1..n_coeffs {
                    let dk: f64 = (0..3).map(|c| g.sh[k][c] * d_rgb[c]).sum();
                    for a in 0..3 {
                        d_dir[a] += jac[k][a] * dk;
                    }
                }
                // dir = v / |v|
                let d = sp.view_dir;
                let dot = d[0] * d_dir[0] + d[1] * d_dir[1] + d[2] * d_dir[2];
                for a in 0..3 {
                    grad.position[a] += (d_dir[a] - d[a] * dot) / sp.view_dist;
                }
            }
            let ndc = [sg.mean2d[0] * 0.5 * w as f64, sg.mean2d[1] * 0.5 * h as f64];
            (i, grad, (ndc[0] * ndc[0] + ndc[1] * ndc[1]).sqrt())
        })
        .collect();
    for (i, grad, norm) in per_splat {
        out.gaussians[i] = grad;
        out.mean2d_grad_norm[i] = norm;
        out.visible[i] = true;
    }
    Ok(out)
}
