//! Direct reference implementations shared by the integration tests.
#![allow(dead_code)]

use pnk::boxes::{Annotation, BBox, Detection, SizeBand};
use pnk::kernels::pool::PoolKind;
use pnk::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cmp::Ordering;

pub fn idx4(d: &[usize], a: usize, b: usize, c: usize, e: usize) -> usize {
    ((a * d[1] + b) * d[2] + c) * d[3] + e
}

pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, s: usize, p: usize, groups: usize) -> Vec<f64> {
    let (xd, wd) = (x.shape(), w.shape());
    let (n, h, wi) = (xd[0], xd[2], xd[3]);
    let (cout, cg, k) = (wd[0], wd[1], wd[2]);
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (wi + 2 * p - k) / s + 1;
    let og = cout / groups;
    let mut out = Vec::new();
    for b in 0..n {
        for oc in 0..cout {
            let g = oc / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bs| bs[oc]);
                    for c in 0..cg {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                    continue;
                                }
                                acc += x.data()[idx4(xd, b, g * cg + c, iy as usize, ix as usize)]
                                    * w.data()[idx4(wd, oc, c, ky, kx)];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Average pooling divides by the number of in-bounds elements.
pub fn naive_pool(x: &Tensor<f64>, kind: PoolKind, k: usize, s: usize, p: usize) -> Vec<f64> {
    let d = x.shape();
    let ho = (d[2] + 2 * p - k) / s + 1;
    let wo = (d[3] + 2 * p - k) / s + 1;
    let mut out = Vec::new();
    for b in 0..d[0] {
        for c in 0..d[1] {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut vals = Vec::new();
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy >= 0 && ix >= 0 && iy < d[2] as isize && ix < d[3] as isize {
                                vals.push(x.data()[idx4(d, b, c, iy as usize, ix as usize)]);
                            }
                        }
                    }
                    out.push(match kind {
                        PoolKind::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        PoolKind::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
                    });
                }
            }
        }
    }
    out
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if inter <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Higher score first, then smaller coordinates, then smaller class id.
fn ranks_before(a: &Detection, b: &Detection) -> bool {
    match b.score.partial_cmp(&a.score).unwrap() {
        Ordering::Less => return true,
        Ordering::Greater => return false,
        Ordering::Equal => {}
    }
    for (x, y) in a.bbox.iter().zip(&b.bbox) {
        if x != y {
            return x < y;
        }
    }
    a.class_id < b.class_id
}

/// Repeatedly takes the best remaining detection and removes every
/// remaining detection of its class that overlaps it above `thr`.
pub fn nms_reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut pool: Vec<Detection> = dets.to_vec();
    let mut out = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            if ranks_before(&pool[i], &pool[best]) {
                best = i;
            }
        }
        let top = pool.remove(best);
        pool.retain(|d| d.class_id != top.class_id || iou(&d.bbox, &top.bbox) <= thr);
        out.push(top);
    }
    out
}

pub fn band_of(b: &BBox, image_size: usize) -> SizeBand {
    let s = image_size as f64 / 256.0;
    let side = ((b[2] - b[0]) * (b[3] - b[1])).sqrt();
    if side < 24.0 * s {
        SizeBand::Small
    } else if side <= 64.0 * s {
        SizeBand::Medium
    } else {
        SizeBand::Large
    }
}

/// AP for one class at one IoU threshold, by enumerating every prefix of the
/// ranked detection list. `None` without ground truth.
pub fn ap_reference(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    class_id: usize,
    thr: f64,
    band: Option<SizeBand>,
    image_size: usize,
) -> Option<f64> {
    let keep = |b: &BBox| band.map_or(true, |bd| band_of(b, image_size) == bd);
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (i, ds) in dets.iter().enumerate() {
        for (j, d) in ds.iter().enumerate() {
            if d.class_id == class_id {
                ranked.push((d.score, i, j));
            }
        }
    }
    // stable sort on score alone keeps (image, position) order for ties
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let class_gts: Vec<Vec<BBox>> = gts
        .iter()
        .map(|g| g.iter().filter(|a| a.class_id == class_id).map(|a| a.bbox).collect())
        .collect();
    let total: usize = class_gts.iter().flatten().filter(|b| keep(b)).count();
    if total == 0 {
        return None;
    }
    let mut taken: Vec<Vec<bool>> = class_gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags: Vec<bool> = Vec::new();
    for &(_, i, j) in &ranked {
        let d = dets[i][j].bbox;
        let mut choice: Option<usize> = None;
        for pass_in_band in [true, false] {
            let mut best_iou = -1.0;
            for (k, g) in class_gts[i].iter().enumerate() {
                if taken[i][k] || keep(g) != pass_in_band {
                    continue;
                }
                let o = iou(&d, g);
                if o >= thr && o > best_iou {
                    best_iou = o;
                    choice = Some(k);
                }
            }
            if choice.is_some() {
                break;
            }
        }
        match choice {
            Some(k) => {
                taken[i][k] = true;
                if keep(&class_gts[i][k]) {
                    flags.push(true);
                }
            }
            None if keep(&d) => flags.push(false),
            None => {}
        }
    }
    let prefixes: Vec<(f64, f64)> = (1..=flags.len())
        .map(|n| {
            let tp = flags[..n].iter().filter(|&&f| f).count() as f64;
            (tp / total as f64, tp / n as f64)
        })
        .collect();
    let mut sum = 0.0;
    for r in 0..101 {
        let level = r as f64 / 100.0;
        let p = prefixes
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        sum += p;
    }
    Some(sum / 101.0)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

// integer grid and coarse scores so ties in score, box and IoU actually occur
pub fn random_box(r: &mut ChaCha8Rng) -> BBox {
    let x = r.gen_range(0..48) as f64;
    let y = r.gen_range(0..48) as f64;
    let w = r.gen_range(3..40) as f64;
    let h = r.gen_range(3..40) as f64;
    [x, y, (x + w).min(64.0), (y + h).min(64.0)]
}

pub fn jitter(r: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let d = |r: &mut ChaCha8Rng| r.gen_range(-3..=3) as f64;
    let x1 = (b[0] + d(r)).clamp(0.0, 60.0);
    let y1 = (b[1] + d(r)).clamp(0.0, 60.0);
    [x1, y1, (b[2] + d(r)).clamp(x1 + 2.0, 64.0), (b[3] + d(r)).clamp(y1 + 2.0, 64.0)]
}

pub fn random_dets(r: &mut ChaCha8Rng, n: usize, classes: usize, near: &[BBox]) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let bbox = if !near.is_empty() && r.gen_bool(0.6) {
                let i = r.gen_range(0..near.len());
                jitter(r, &near[i])
            } else {
                random_box(r)
            };
            Detection { class_id: r.gen_range(0..classes), score: r.gen_range(1..10) as f64 / 10.0, bbox }
        })
        .collect()
}
