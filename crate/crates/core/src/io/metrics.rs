//! Image and segmentation metrics: PSNR, SSIM, mIoU and boundary mIoU.

use rayon::prelude::*;
use serde::Serialize;

use crate::image::{Image, MaskMap};
use crate::losses::ssim;
use crate::{Error, Result};

pub const PSNR_CAP: f64 = 100.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    if a.data.is_empty() {
        return Err(Error::ZeroSizeImage);
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

/// `10·log10(1/MSE)`, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim::ssim(a, b)
}

/// Boundary band width for an image: `max(1, round(0.02·diagonal))`.
pub fn boundary_band(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.02 * diag).round() as usize).max(1)
}

/// Pixels of `mask` within Chebyshev distance `band` of a non-mask pixel
/// (pixels outside the image count as non-mask).
pub fn inner_boundary(mask: &[bool], width: usize, height: usize, band: usize) -> Vec<bool> {
    // Summed-area table over the mask, zero outside the image.
    let w1 = width + 1;
    let mut sat = vec![0u32; w1 * (height + 1)];
    for y in 0..height {
        let mut row = 0;
        for x in 0..width {
            row += mask[y * width + x] as u32;
            sat[(y + 1) * w1 + x + 1] = sat[y * w1 + x + 1] + row;
        }
    }
    let full = ((2 * band + 1) * (2 * band + 1)) as u32;
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            let interior = x >= band && y >= band && x + band < width && y + band < height && {
                let (x0, y0, x1, y1) = (x - band, y - band, x + band + 1, y + band + 1);
                sat[y1 * w1 + x1] + sat[y0 * w1 + x0] - sat[y0 * w1 + x1] - sat[y1 * w1 + x0] == full
            };
            out[y * width + x] = !interior;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    inter: u64,
    union: u64,
}

impl Counts {
    fn iou(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.inter as f64 / self.union as f64
        }
    }

    fn add(self, o: Counts) -> Counts {
        Counts { inter: self.inter + o.inter, union: self.union + o.union }
    }
}

fn check_views(pred: &[MaskMap], gt: &[MaskMap]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} predicted vs {} ground-truth masks", pred.len(), gt.len())));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.width != g.width || p.height != g.height {
            return Err(Error::ShapeMismatch("mask sizes differ".into()));
        }
    }
    Ok(())
}

fn pair_counts(pred: &[MaskMap], gt: &[MaskMap], pairs: &[(u32, u32)], band: Option<usize>) -> Vec<Counts> {
    let per_view: Vec<Vec<Counts>> = pred
        .par_iter()
        .zip(gt)
        .map(|(p, g)| {
            pairs
                .iter()
                .map(|&(pid, gid)| {
                    // Predicted id 0 means "no match" and selects no pixels.
                    let mut a: Vec<bool> = p.ids.iter().map(|&v| pid != 0 && v == pid).collect();
                    let mut b = g.binary(gid);
                    if let Some(band) = band {
                        a = inner_boundary(&a, p.width, p.height, band);
                        b = inner_boundary(&b, g.width, g.height, band);
                    }
                    let mut c = Counts::default();
                    for (x, y) in a.iter().zip(&b) {
                        c.inter += (*x && *y) as u64;
                        c.union += (*x || *y) as u64;
                    }
                    c
                })
                .collect()
        })
        .collect();
    let mut total = vec![Counts::default(); pairs.len()];
    for v in per_view {
        for (t, c) in total.iter_mut().zip(v) {
            *t = t.add(c);
        }
    }
    total
}

/// Per-pair IoU with pixels pooled over all views, in pair order.
pub fn pair_ious(pred: &[MaskMap], gt: &[MaskMap], pairs: &[(u32, u32)]) -> Result<Vec<f64>> {
    check_views(pred, gt)?;
    Ok(pair_counts(pred, gt, pairs, None).into_iter().map(Counts::iou).collect())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean over `(pred_id, gt_id)` pairs of the pooled IoU. A union that is empty on
/// both sides counts as 1.
pub fn miou(pred: &[MaskMap], gt: &[MaskMap], pairs: &[(u32, u32)]) -> Result<f64> {
    Ok(mean(&pair_ious(pred, gt, pairs)?))
}

/// Boundary mIoU: IoU of the inner boundary bands of width `band`.
pub fn mbiou(pred: &[MaskMap], gt: &[MaskMap], pairs: &[(u32, u32)], band: usize) -> Result<f64> {
    check_views(pred, gt)?;
    let ious: Vec<f64> = pair_counts(pred, gt, pairs, Some(band)).into_iter().map(Counts::iou).collect();
    Ok(mean(&ious))
}

/// For every ground-truth id, the predicted id with the highest pooled IoU
/// (ties to the smaller id; 0 when nothing overlaps).
pub fn match_ids(pred: &[MaskMap], gt: &[MaskMap]) -> Result<Vec<(u32, u32)>> {
    check_views(pred, gt)?;
    let gt_max = gt.iter().map(MaskMap::max_id).max().unwrap_or(0) as usize;
    let pred_max = pred.iter().map(MaskMap::max_id).max().unwrap_or(0) as usize;
    let mut inter = vec![0u64; (gt_max + 1) * (pred_max + 1)];
    let mut gt_area = vec![0u64; gt_max + 1];
    let mut pred_area = vec![0u64; pred_max + 1];
    for (p, g) in pred.iter().zip(gt) {
        for (&pv, &gv) in p.ids.iter().zip(&g.ids) {
            inter[gv as usize * (pred_max + 1) + pv as usize] += 1;
            gt_area[gv as usize] += 1;
            pred_area[pv as usize] += 1;
        }
    }
    let mut pairs = Vec::new();
    for gid in 1..=gt_max {
        if gt_area[gid] == 0 {
            continue;
        }
        let mut best = (0.0, 0u32);
        for pid in 1..=pred_max {
            let i = inter[gid * (pred_max + 1) + pid];
            if i == 0 {
                continue;
            }
            let iou = i as f64 / (gt_area[gid] + pred_area[pid] - i) as f64;
            if iou > best.0 {
                best = (iou, pid as u32);
            }
        }
        pairs.push((best.1, gid as u32));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentationScores {
    pub pairs: Vec<(u32, u32)>,
    pub miou: f64,
    pub mbiou: f64,
    pub band: usize,
}

/// Matches ids and computes mIoU and mBIoU with the default band.
pub fn segmentation_scores(pred: &[MaskMap], gt: &[MaskMap]) -> Result<SegmentationScores> {
    let pairs = match_ids(pred, gt)?;
    let band = gt.first().map_or(1, |m| boundary_band(m.width, m.height));
    Ok(SegmentationScores { miou: miou(pred, gt, &pairs)?, mbiou: mbiou(pred, gt, &pairs, band)?, pairs, band })
}
