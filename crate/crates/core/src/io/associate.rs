//! Greedy cross-view mask association: turns per-view instance masks with
//! arbitrary ids into maps whose ids are consistent across the sequence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::image::MaskMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociateConfig {
    /// Minimum IoU for a match.
    pub iou_threshold: f64,
    /// Unmatched masks smaller than this fraction of the image are dropped instead of
    /// spawning a new id.
    pub min_area_fraction: f64,
}

impl Default for AssociateConfig {
    fn default() -> Self {
        AssociateConfig { iou_threshold: 0.3, min_area_fraction: 1e-3 }
    }
}

fn iou(a: &[usize], b: &[usize]) -> f64 {
    // Both are sorted pixel index lists.
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn segments(mask: &MaskMap) -> BTreeMap<u32, Vec<usize>> {
    let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (p, &id) in mask.ids.iter().enumerate() {
        if id != 0 {
            out.entry(id).or_default().push(p);
        }
    }
    out
}

/// Associates masks of an ordered view sequence. The first view's masks get ids
/// `1..=n` in ascending local-id order; later masks are matched greedily by
/// descending IoU against the last-seen mask of every known id, and unmatched
/// masks above the area floor spawn the next free id. Output ids are contiguous.
pub fn associate_masks_greedy(views: &[MaskMap], config: &AssociateConfig) -> Vec<MaskMap> {
    let mut tracks: Vec<Vec<usize>> = Vec::new();
    let mut out = Vec::with_capacity(views.len());
    for (v, mask) in views.iter().enumerate() {
        let segs: Vec<(u32, Vec<usize>)> = segments(mask).into_iter().collect();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (si, (_, pixels)) in segs.iter().enumerate() {
            for (ti, track) in tracks.iter().enumerate() {
                let score = iou(pixels, track);
                if score >= config.iou_threshold {
                    pairs.push((score, ti, si));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut assigned: Vec<Option<u32>> = vec![None; segs.len()];
        let mut track_used = vec![false; tracks.len()];
        for (_, ti, si) in pairs {
            if assigned[si].is_none() && !track_used[ti] {
                assigned[si] = Some(ti as u32 + 1);
                track_used[ti] = true;
            }
        }
        let floor = (config.min_area_fraction * mask.ids.len() as f64).max(1.0);
        for (si, (_, pixels)) in segs.iter().enumerate() {
            if assigned[si].is_none() && (v == 0 || pixels.len() as f64 >= floor) {
                tracks.push(Vec::new());
                assigned[si] = Some(tracks.len() as u32);
            }
        }
        let mut result = MaskMap::new(mask.width, mask.height);
        for (si, (_, pixels)) in segs.iter().enumerate() {
            if let Some(id) = assigned[si] {
                for &p in pixels {
                    result.ids[p] = id;
                }
                tracks[id as usize - 1] = pixels.clone();
            }
        }
        out.push(result);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(w: usize, h: usize, rects: &[(u32, usize, usize, usize, usize)]) -> MaskMap {
        let mut m = MaskMap::new(w, h);
        for &(id, x0, y0, x1, y1) in rects {
            for y in y0..y1 {
                for x in x0..x1 {
                    m.ids[y * w + x] = id;
                }
            }
        }
        m
    }

    #[test]
    fn overlapping_masks_share_id() {
        let a = rect(20, 20, &[(9, 0, 0, 10, 10)]);
        let b = rect(20, 20, &[(4, 1, 0, 11, 10)]);
        let out = associate_masks_greedy(&[a, b], &AssociateConfig::default());
        assert_eq!(out[0].max_id(), 1);
        assert_eq!(out[1].area(1), 100);
    }

    #[test]
    fn disjoint_mask_spawns_next_id() {
        let a = rect(20, 20, &[(3, 0, 0, 5, 5), (8, 10, 10, 15, 15)]);
        let b = rect(20, 20, &[(1, 0, 0, 5, 5), (2, 10, 10, 15, 15), (5, 15, 0, 20, 5)]);
        let out = associate_masks_greedy(&[a, b], &AssociateConfig::default());
        assert_eq!(out[1].area(3), 25);
        assert_eq!(out[1].ids[15], 3);
        assert_eq!(out[1].ids[0], 1);
    }

    #[test]
    fn small_unmatched_masks_are_dropped() {
        let a = rect(100, 100, &[(1, 0, 0, 20, 20)]);
        let b = rect(100, 100, &[(1, 0, 0, 20, 20), (2, 50, 50, 52, 52)]);
        let cfg = AssociateConfig { min_area_fraction: 1e-3, ..Default::default() };
        let out = associate_masks_greedy(&[a, b], &cfg);
        assert_eq!(out[1].max_id(), 1);
        assert_eq!(out[1].area(0), 100 * 100 - 400);
    }

    #[test]
    fn low_iou_does_not_match() {
        let a = rect(20, 20, &[(1, 0, 0, 10, 10)]);
        let b = rect(20, 20, &[(1, 8, 0, 18, 10)]);
        let out = associate_masks_greedy(&[a, b], &AssociateConfig::default());
        assert_eq!(out[1].max_id(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ids_are_contiguous(seed in 0u64..1000, views in 1usize..6) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let masks: Vec<MaskMap> = (0..views).map(|_| {
                let rects: Vec<_> = (0..rng.random_range(0..5u32)).map(|k| {
                    let x = rng.random_range(0..16usize);
                    let y = rng.random_range(0..16usize);
                    (rng.random_range(1..50u32) + k * 50, x, y, x + rng.random_range(1..5), y + rng.random_range(1..5))
                }).collect();
                rect(20, 20, &rects)
            }).collect();
            let out = associate_masks_greedy(&masks, &AssociateConfig::default());
            let mut seen = std::collections::BTreeSet::new();
            for m in &out {
                seen.extend(m.ids.iter().copied().filter(|&v| v > 0));
            }
            let k = seen.len() as u32;
            prop_assert_eq!(seen.into_iter().collect::<Vec<_>>(), (1..=k).collect::<Vec<_>>());
        }
    }
}
