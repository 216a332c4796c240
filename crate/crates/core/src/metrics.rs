//! Evaluation and cost accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::boxes::{self, Annotation, Detection, SizeBand};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Detector;
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::{Element, Tensor};

pub use crate::boxes::iou;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub const RECALL_POINTS: usize = 101;

/// Whether a detection passes a confidence threshold; 0 keeps everything.
pub fn passes(score: f64, conf: f64) -> bool {
    conf <= 0.0 || score > conf
}

/// One class, one IoU threshold, one size band: detections marked TP/FP
/// in evaluation order, with the number of non-ignored ground truths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// `(score, is_true_positive)` for every non-ignored detection, in order.
    pub scored: Vec<(f64, bool)>,
    pub num_gt: usize,
}

/// Greedy matching over all images for one class. Detections are visited by
/// descending score (ties: image index, then position); each takes the
/// unmatched ground truth with the highest IoU ≥ `thr`, preferring
/// in-band ground truths over out-of-band ones. Matches to out-of-band
/// ground truths, and unmatched detections whose own box is out of band, are
/// ignored.
pub fn match_class(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    class_id: usize,
    thr: f64,
    band: Option<SizeBand>,
    image_size: usize,
) -> MatchResult {
    let in_band = |b: &boxes::BBox| band.map_or(true, |bd| SizeBand::of_box(b, image_size) == bd);
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (i, ds) in dets.iter().enumerate() {
        for (j, d) in ds.iter().enumerate() {
            if d.class_id == class_id {
                order.push((i, j));
            }
        }
    }
    order.sort_by(|&(ia, ja), &(ib, jb)| {
        dets[ib][jb]
            .score
            .total_cmp(&dets[ia][ja].score)
            .then(ia.cmp(&ib))
            .then(ja.cmp(&jb))
    });
    let gt_of: Vec<Vec<(boxes::BBox, bool)>> = gts
        .iter()
        .map(|g| {
            g.iter()
                .filter(|a| a.class_id == class_id)
                .map(|a| (a.bbox, !in_band(&a.bbox)))
                .collect()
        })
        .collect();
    let mut used: Vec<Vec<bool>> = gt_of.iter().map(|g| vec![false; g.len()]).collect();
    let num_gt = gt_of.iter().flatten().filter(|(_, ign)| !ign).count();
    let mut scored = Vec::with_capacity(order.len());
    for (i, j) in order {
        let d = &dets[i][j];
        let candidates = gt_of.get(i).map_or(&[][..], |v| v.as_slice());
        let mut best: Option<(usize, f64, bool)> = None;
        for (k, &(g, ignored)) in candidates.iter().enumerate() {
            if used[i][k] {
                continue;
            }
            let o = boxes::iou(&d.bbox, &g);
            if o < thr {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bo, bign)) => (bign && !ignored) || (bign == ignored && o > bo),
            };
            if better {
                best = Some((k, o, ignored));
            }
        }
        match best {
            Some((k, _, ignored)) => {
                used[i][k] = true;
                if !ignored {
                    scored.push((d.score, true));
                }
            }
            None => {
                if in_band(&d.bbox) {
                    scored.push((d.score, false));
                }
            }
        }
    }
    MatchResult { scored, num_gt }
}

/// Area under the 101-point interpolated precision/recall curve, or `None`
/// when there are no ground truths.
pub fn interpolated_ap(m: &MatchResult) -> Option<f64> {
    if m.num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(m.scored.len());
    let mut precision = Vec::with_capacity(m.scored.len());
    for (k, &(_, is_tp)) in m.scored.iter().enumerate() {
        tp += usize::from(is_tp);
        recall.push(tp as f64 / m.num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while idx < recall.len() && recall[idx] < level {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    /// AP over IoU 0.50:0.95 per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub num_detections: usize,
    pub num_gt: usize,
    pub gt_per_band: [usize; 3],
    pub conf_threshold: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// COCO-style AP. `dets` must already be NMS'd; detections at or below
/// `conf_threshold` are discarded first.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    iou_thresholds: &[f64],
    conf_threshold: f64,
    num_classes: usize,
    image_size: usize,
) -> EvalReport {
    let kept: Vec<Vec<Detection>> = dets
        .iter()
        .map(|d| d.iter().filter(|x| passes(x.score, conf_threshold)).copied().collect())
        .collect();
    let band_ap = |band: Option<SizeBand>, thrs: &[f64]| -> Vec<Option<f64>> {
        (0..num_classes)
            .map(|c| {
                let aps: Vec<f64> = thrs
                    .iter()
                    .filter_map(|&t| interpolated_ap(&match_class(&kept, gts, c, t, band, image_size)))
                    .collect();
                (!aps.is_empty()).then(|| mean(aps.into_iter()))
            })
            .collect()
    };
    let per_class = band_ap(None, iou_thresholds);
    let ap50_thr: Vec<f64> = iou_thresholds.iter().copied().filter(|t| (t - 0.5).abs() < 1e-9).collect();
    let ap50 = mean(band_ap(None, if ap50_thr.is_empty() { &[0.5] } else { &ap50_thr }).into_iter().flatten());
    let band = |b| mean(band_ap(Some(b), iou_thresholds).into_iter().flatten());
    let mut gt_per_band = [0; 3];
    for a in gts.iter().flatten() {
        gt_per_band[SizeBand::of_box(&a.bbox, image_size).index()] += 1;
    }
    EvalReport {
        ap: mean(per_class.iter().flatten().copied()),
        ap50,
        ap_small: band(SizeBand::Small),
        ap_medium: band(SizeBand::Medium),
        ap_large: band(SizeBand::Large),
        per_class,
        num_detections: kept.iter().map(Vec::len).sum(),
        num_gt: gts.iter().map(Vec::len).sum(),
        gt_per_band,
        conf_threshold,
    }
}

impl EvalReport {
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("conf_threshold".to_string(), self.conf_threshold),
            ("AP".into(), self.ap),
            ("AP50".into(), self.ap50),
            ("APs".into(), self.ap_small),
            ("APm".into(), self.ap_medium),
            ("APl".into(), self.ap_large),
            ("detections".into(), self.num_detections as f64),
            ("ground_truths".into(), self.num_gt as f64),
        ];
        for (band, n) in SizeBand::ALL.iter().zip(self.gt_per_band) {
            rows.push((format!("gt_{}", band.name()), n as f64));
        }
        for (c, ap) in self.per_class.iter().enumerate() {
            rows.push((format!("AP_class{c}"), ap.unwrap_or(f64::NAN)));
        }
        rows
    }

    /// `key=value` pairs on one line.
    pub fn to_kv(&self) -> String {
        self.rows()
            .iter()
            .map(|(k, v)| format!("{k}={}", fmt_value(*v)))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_csv(&self) -> String {
        to_csv(&self.rows())
    }
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.6}")
    }
}

/// `metric,value` table.
pub fn to_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{}", fmt_value(*v));
    }
    s
}

// ------------------------------------------------------------------ cost

pub fn count_params<E: Element>(store: &ParamStore<E>) -> usize {
    store.count()
}

/// Forward graph of the model on zeros of the given shape, in eval mode.
pub fn trace<E: Element>(model: &Detector, store: &ParamStore<E>, input_shape: &[usize]) -> Result<Graph<E>> {
    let mut store = store.clone();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    ctx.graph.set_check_finite(false);
    model.forward(&mut ctx, Tensor::zeros(input_shape))?;
    Ok(ctx.into_graph())
}

pub fn count_flops<E: Element>(model: &Detector, store: &ParamStore<E>, input_shape: &[usize]) -> Result<u64> {
    Ok(trace(model, store, input_shape)?.total_flops())
}

/// FLOPs grouped by the first `depth` components of each node's scope.
pub fn flops_by_scope<E: Element>(g: &Graph<E>, depth: usize) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for n in g.info() {
        let key: Vec<&str> = n.scope.split('/').filter(|s| !s.is_empty()).take(depth).collect();
        let key = if key.is_empty() { "input".to_string() } else { key.join("/") };
        *out.entry(key).or_insert(0) += n.flops;
    }
    out
}

/// Parameter counts grouped by the first `depth` components of their names.
pub fn params_by_scope<E: Element>(store: &ParamStore<E>, depth: usize) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (t, name) in store.params().iter().zip(store.param_names()) {
        let key: Vec<&str> = name.split('.').take(depth).collect();
        *out.entry(key.join("/")).or_insert(0) += t.numel();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    /// Seconds per forward, in measurement order.
    pub samples: Vec<f64>,
    pub median: f64,
    pub p95: f64,
    pub hardware: String,
}

/// Median is the `⌈n/2⌉`-th order statistic, p95 the nearest-rank percentile.
pub fn summarize_latency(samples: Vec<f64>) -> LatencyReport {
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = sorted.get((n.max(1) - 1) / 2).copied().unwrap_or(0.0);
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n.max(1));
    let p95 = sorted.get(rank - 1).copied().unwrap_or(0.0);
    LatencyReport {
        samples,
        median,
        p95,
        hardware: hardware_string(),
    }
}

pub fn hardware_string() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu} ({} {}, {threads} threads)", std::env::consts::OS, std::env::consts::ARCH)
}

pub fn time_forward<E: Element>(
    model: &Detector,
    store: &ParamStore<E>,
    input: &Tensor<E>,
    reps: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if reps < 5 {
        return Err(Error::config(format!("latency needs at least 5 repetitions, got {reps}")));
    }
    let mut store = store.clone();
    let run = |store: &mut ParamStore<E>| -> Result<f64> {
        let t0 = Instant::now();
        let mut ctx = Ctx::new(store, Mode::Eval);
        ctx.graph.set_check_finite(false);
        model.forward(&mut ctx, input.clone())?;
        Ok(t0.elapsed().as_secs_f64())
    };
    for _ in 0..warmup {
        run(&mut store)?;
    }
    let samples = (0..reps).map(|_| run(&mut store)).collect::<Result<Vec<_>>>()?;
    Ok(summarize_latency(samples))
}
