//! Anchor-free detection heads, center-cell target assignment, the training
//! loss, decoding and NMS.
//!
//! Every head emits `1 + K + 4` channels per cell, in the order
//! `[objectness, class logits…, tx, ty, tw, th]`. A box decodes as
//! `cx = (gx + σ(tx))·s`, `w = exp(tw)·s` for stride `s`.

use std::cmp::Ordering;

use crate::blocks::{Activation, Conv, ConvBnAct};
use crate::boxes::{self, Annotation, BBox, Detection};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::kernels::sigmoid;
use crate::necks::PyramidFeatures;
use crate::params::{Builder, Ctx};
use crate::tensor::{dims4, Element};

/// Objectness bias at init: logit of a 0.01 prior.
pub const OBJ_PRIOR_LOGIT: f64 = -4.595;
/// `tw`/`th` are clamped to this range before exponentiation.
pub const LOG_SIZE_CLAMP: f64 = 8.0;
pub const DEFAULT_NMS_IOU: f64 = 0.65;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadMode {
    Coupled,
    Decoupled,
}

impl HeadMode {
    pub fn name(self) -> &'static str {
        match self {
            HeadMode::Coupled => "coupled",
            HeadMode::Decoupled => "decoupled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "coupled" => Some(HeadMode::Coupled),
            "decoupled" => Some(HeadMode::Decoupled),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadSpec {
    pub mode: HeadMode,
    pub num_classes: usize,
    /// Input channels per level.
    pub channels: Vec<usize>,
    /// Hidden width of the head stacks.
    pub width: usize,
    pub act: Activation,
}

impl HeadSpec {
    pub fn outputs(&self) -> usize {
        5 + self.num_classes
    }
}

#[derive(Clone, Debug)]
enum Predictor {
    Coupled(Conv),
    Decoupled {
        cls_stack: ConvBnAct,
        cls_pred: Conv,
        reg_stack: ConvBnAct,
        /// objectness followed by the four box channels
        reg_pred: Conv,
    },
}

#[derive(Clone, Debug)]
pub struct LevelHead {
    stem: ConvBnAct,
    pred: Predictor,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub spec: HeadSpec,
    pub levels: Vec<LevelHead>,
}

fn set_bias<E: Element>(b: &mut Builder<'_, E>, conv: &Conv, values: &[f64]) {
    let id = conv.bias.expect("prediction conv has a bias");
    for (d, &v) in b.param_mut(id).data_mut().iter_mut().zip(values) {
        *d = E::of(v);
    }
}

impl Head {
    pub fn build<E: Element>(b: &mut Builder<'_, E>, spec: &HeadSpec) -> Result<Self> {
        if spec.num_classes == 0 {
            return Err(Error::config("head needs at least one class"));
        }
        let (k, w, act) = (spec.num_classes, spec.width, spec.act);
        let mut levels = Vec::with_capacity(spec.channels.len());
        for (l, &c) in spec.channels.iter().enumerate() {
            let level = b.scoped(&format!("l{l}"), |b| {
                let stem = b.scoped("stem", |b| ConvBnAct::standard(b, c, w, 3, 1, act))?;
                let pred = match spec.mode {
                    HeadMode::Coupled => {
                        let conv = b.scoped("pred", |b| Conv::build(b, w, 5 + k, 1, 1, 1, true))?;
                        let mut bias = vec![0.0; 5 + k];
                        bias[0] = OBJ_PRIOR_LOGIT;
                        set_bias(b, &conv, &bias);
                        Predictor::Coupled(conv)
                    }
                    HeadMode::Decoupled => {
                        let cls_stack = b.scoped("cls", |b| ConvBnAct::standard(b, w, w, 3, 1, act))?;
                        let cls_pred = b.scoped("cls_pred", |b| Conv::build(b, w, k, 1, 1, 1, true))?;
                        let reg_stack = b.scoped("reg", |b| ConvBnAct::standard(b, w, w, 3, 1, act))?;
                        let reg_pred = b.scoped("reg_pred", |b| Conv::build(b, w, 5, 1, 1, 1, true))?;
                        set_bias(b, &reg_pred, &[OBJ_PRIOR_LOGIT, 0.0, 0.0, 0.0, 0.0]);
                        Predictor::Decoupled {
                            cls_stack,
                            cls_pred,
                            reg_stack,
                            reg_pred,
                        }
                    }
                };
                Ok::<_, Error>(LevelHead { stem, pred })
            })?;
            levels.push(level);
        }
        Ok(Head {
            spec: spec.clone(),
            levels,
        })
    }

    /// Raw predictions `[N, 5+K, H, W]` per level.
    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, feats: &PyramidFeatures) -> Result<Vec<Var>> {
        if feats.levels.len() != self.levels.len() {
            return Err(Error::shape(
                "head",
                format!("{} levels in, head has {}", feats.levels.len(), self.levels.len()),
            ));
        }
        let mut out = Vec::with_capacity(self.levels.len());
        for (l, (head, &(_, x))) in self.levels.iter().zip(&feats.levels).enumerate() {
            let c = dims4(ctx.graph.shape(x), "head")?[1];
            if c != self.spec.channels[l] {
                return Err(Error::shape(
                    "head",
                    format!("level {l} has {c} channels, head expects {}", self.spec.channels[l]),
                ));
            }
            let y = ctx.scoped(&format!("head/l{l}"), |ctx| {
                let s = head.stem.forward(ctx, x)?;
                match &head.pred {
                    Predictor::Coupled(p) => p.forward(ctx, s),
                    Predictor::Decoupled {
                        cls_stack,
                        cls_pred,
                        reg_stack,
                        reg_pred,
                    } => {
                        let c = cls_stack.forward(ctx, s)?;
                        let c = cls_pred.forward(ctx, c)?;
                        let r = reg_stack.forward(ctx, s)?;
                        let r = reg_pred.forward(ctx, r)?;
                        let obj = ctx.graph.slice_channels(r, 0, 1)?;
                        let bx = ctx.graph.slice_channels(r, 1, 4)?;
                        ctx.graph.concat_channels(&[obj, c, bx])
                    }
                }
            })?;
            out.push(y);
        }
        Ok(out)
    }
}

// --------------------------------------------------------- assignment

/// Level for a box: `≤ 24·r` → first, `≤ 64·r` → second, else third, with
/// `r = image_size / 256`.
pub fn level_for_box(b: &BBox, image_size: usize, num_levels: usize) -> usize {
    let r = image_size as f64 / 256.0;
    let side = boxes::sqrt_area(b);
    let level = if side <= 24.0 * r {
        0
    } else if side <= 64.0 * r {
        1
    } else {
        2
    };
    level.min(num_levels.saturating_sub(1))
}

/// One positive cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    pub image: usize,
    pub level: usize,
    pub gy: usize,
    pub gx: usize,
    pub class_id: usize,
    pub gt: BBox,
    /// `[tx, ty, tw, th]`: center offsets in cell units, log size over stride.
    pub target: [f64; 4],
    /// Index of the annotation within its image.
    pub gt_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// `[N, H, W]` objectness targets.
    pub obj: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    pub batch: usize,
    pub num_classes: usize,
    pub levels: Vec<LevelTargets>,
    pub positives: Vec<Positive>,
    /// Zero-area boxes that were skipped.
    pub degenerate: usize,
}

impl TargetMap {
    pub fn positives_on(&self, level: usize) -> impl Iterator<Item = &Positive> {
        self.positives.iter().filter(move |p| p.level == level)
    }
}

fn nearest_free(taken: &[bool], h: usize, w: usize, gy: usize, gx: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if taken[y * w + x] {
                continue;
            }
            let d = y.abs_diff(gy).pow(2) + x.abs_diff(gx).pow(2);
            if best.map_or(true, |(bd, _, _)| d < bd) {
                best = Some((d, y, x));
            }
        }
    }
    best.map(|(_, y, x)| (y, x))
}

/// Center-cell assignment. Each annotation goes to one level by size and to
/// the cell containing its center; if that cell is already taken on that
/// level the nearest free cell is used instead.
pub fn assign_targets(
    gts: &[Vec<Annotation>],
    image_size: usize,
    strides: &[usize],
    num_classes: usize,
) -> Result<TargetMap> {
    let mut levels: Vec<LevelTargets> = strides
        .iter()
        .map(|&s| {
            if s == 0 || image_size % s != 0 {
                return Err(Error::config(format!("stride {s} does not divide image size {image_size}")));
            }
            let hw = image_size / s;
            Ok(LevelTargets {
                stride: s,
                h: hw,
                w: hw,
                obj: vec![0.0; gts.len() * hw * hw],
            })
        })
        .collect::<Result<_>>()?;
    let mut positives = Vec::new();
    let mut degenerate = 0;
    let limit = image_size as f64;
    for (n, anns) in gts.iter().enumerate() {
        for (i, a) in anns.iter().enumerate() {
            let b = a.bbox;
            if boxes::is_degenerate(&b) {
                degenerate += 1;
                continue;
            }
            if b.iter().any(|v| !v.is_finite()) || b[0] < 0.0 || b[1] < 0.0 || b[2] > limit || b[3] > limit {
                return Err(Error::usage(format!("box {b:?} lies outside the {image_size}px image")));
            }
            if a.class_id >= num_classes {
                return Err(Error::usage(format!(
                    "class {} out of range for {num_classes} classes",
                    a.class_id
                )));
            }
            let level = level_for_box(&b, image_size, strides.len());
            let lt = &mut levels[level];
            let s = lt.stride as f64;
            let (cx, cy) = boxes::center(&b);
            let gx = ((cx / s).floor() as usize).min(lt.w - 1);
            let gy = ((cy / s).floor() as usize).min(lt.h - 1);
            let plane = &mut lt.obj[n * lt.h * lt.w..(n + 1) * lt.h * lt.w];
            let taken: Vec<bool> = plane.iter().map(|&v| v > 0.0).collect();
            let (gy, gx) = if taken[gy * lt.w + gx] {
                match nearest_free(&taken, lt.h, lt.w, gy, gx) {
                    Some(c) => c,
                    // every cell on this level is taken; the box is dropped
                    None => continue,
                }
            } else {
                (gy, gx)
            };
            plane[gy * lt.w + gx] = 1.0;
            positives.push(Positive {
                image: n,
                level,
                gy,
                gx,
                class_id: a.class_id,
                gt: b,
                target: [
                    cx / s - gx as f64,
                    cy / s - gy as f64,
                    (boxes::width(&b) / s).ln(),
                    (boxes::height(&b) / s).ln(),
                ],
                gt_index: i,
            });
        }
    }
    Ok(TargetMap {
        batch: gts.len(),
        num_classes,
        levels,
        positives,
        degenerate,
    })
}

// --------------------------------------------------------------- loss

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub obj: f64,
    pub cls: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            obj: 1.0,
            cls: 0.5,
            bbox: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub obj: f64,
    pub cls: f64,
    pub bbox: f64,
    pub positives: usize,
}

/// `log(1 + e^z) − t·z`, stable for large `|z|`.
fn bce_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Box from raw `[tx, ty, tw, th]` at cell `(gy, gx)`, with the Jacobian
/// of `[x1, y1, x2, y2]` with respect to the raw values.
fn decode_cell(raw: [f64; 4], gy: usize, gx: usize, stride: f64) -> (BBox, [[f64; 4]; 4]) {
    let (sx, sy) = (sigmoid(raw[0]), sigmoid(raw[1]));
    let clamp = |v: f64| v.clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP);
    let inside = |v: f64| if v.abs() < LOG_SIZE_CLAMP { 1.0 } else { 0.0 };
    let cx = (gx as f64 + sx) * stride;
    let cy = (gy as f64 + sy) * stride;
    let w = clamp(raw[2]).exp() * stride;
    let h = clamp(raw[3]).exp() * stride;
    let b = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
    let dcx = sx * (1.0 - sx) * stride;
    let dcy = sy * (1.0 - sy) * stride;
    let dw = w * inside(raw[2]);
    let dh = h * inside(raw[3]);
    // rows: x1, y1, x2, y2; columns: tx, ty, tw, th
    let jac = [
        [dcx, 0.0, -dw / 2.0, 0.0],
        [0.0, dcy, 0.0, -dh / 2.0],
        [dcx, 0.0, dw / 2.0, 0.0],
        [0.0, dcy, 0.0, dh / 2.0],
    ];
    (b, jac)
}

/// IoU of `p` against `g` and its gradient with respect to `p`'s corners.
fn iou_with_grad(p: &BBox, g: &BBox) -> (f64, [f64; 4]) {
    let ix1 = p[0].max(g[0]);
    let iy1 = p[1].max(g[1]);
    let ix2 = p[2].min(g[2]);
    let iy2 = p[3].min(g[3]);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let pw = p[2] - p[0];
    let ph = p[3] - p[1];
    let ap = pw * ph;
    let ag = boxes::area(g);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = ap + ag - inter;
    let di = [
        if p[0] > g[0] { -ih } else { 0.0 },
        if p[1] > g[1] { -iw } else { 0.0 },
        if p[2] < g[2] { ih } else { 0.0 },
        if p[3] < g[3] { iw } else { 0.0 },
    ];
    let dap = [-ph, -pw, ph, pw];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let du = dap[k] - di[k];
        grad[k] = (di[k] * union - inter * du) / (union * union);
    }
    (inter / union, grad)
}

/// Objectness BCE summed over every cell of every level, class BCE summed
/// over classes, and `1 − IoU`, each divided by the number of positives in
/// the batch (by one when there are none). The result is a scalar node whose gradient is computed here.
pub fn compute_loss<E: Element>(
    ctx: &mut Ctx<'_, E>,
    preds: &[Var],
    targets: &TargetMap,
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if preds.len() != targets.levels.len() {
        return Err(Error::shape(
            "loss",
            format!("{} prediction levels, {} target levels", preds.len(), targets.levels.len()),
        ));
    }
    let k = targets.num_classes;
    let mut dims = Vec::with_capacity(preds.len());
    for (&p, lt) in preds.iter().zip(&targets.levels) {
        let d = dims4(ctx.graph.shape(p), "loss")?;
        if d != [targets.batch, 5 + k, lt.h, lt.w] {
            return Err(Error::shape(
                "loss",
                format!("prediction {d:?} vs target grid {}x{}x{} with {k} classes", targets.batch, lt.h, lt.w),
            ));
        }
        dims.push(d);
    }
    let mut grads: Vec<Vec<f64>> = preds.iter().map(|&p| vec![0.0; ctx.graph.value(p).len()]).collect();
    let mut out = LossBreakdown {
        positives: targets.positives.len(),
        ..Default::default()
    };

    let inv_pos = 1.0 / targets.positives.len().max(1) as f64;
    for (l, (&p, lt)) in preds.iter().zip(&targets.levels).enumerate() {
        let [n, c, h, w] = dims[l];
        let hw = h * w;
        let v = ctx.graph.value(p);
        for img in 0..n {
            for cell in 0..hw {
                let idx = img * c * hw + cell;
                let z = v[idx].f64();
                let t = lt.obj[img * hw + cell];
                out.obj += bce_logits(z, t) * inv_pos;
                grads[l][idx] += weights.obj * (sigmoid(z) - t) * inv_pos;
            }
        }
    }

    if !targets.positives.is_empty() {
        for pos in &targets.positives {
            let [_, c, h, w] = dims[pos.level];
            let hw = h * w;
            let v = ctx.graph.value(preds[pos.level]);
            let at = |ch: usize| pos.image * c * hw + ch * hw + pos.gy * w + pos.gx;
            for cls in 0..k {
                let z = v[at(1 + cls)].f64();
                let t = if cls == pos.class_id { 1.0 } else { 0.0 };
                out.cls += bce_logits(z, t) * inv_pos;
                grads[pos.level][at(1 + cls)] += weights.cls * (sigmoid(z) - t) * inv_pos;
            }
            let raw = [
                v[at(1 + k)].f64(),
                v[at(2 + k)].f64(),
                v[at(3 + k)].f64(),
                v[at(4 + k)].f64(),
            ];
            let stride = targets.levels[pos.level].stride as f64;
            let (pb, jac) = decode_cell(raw, pos.gy, pos.gx, stride);
            let (iou, diou) = iou_with_grad(&pb, &pos.gt);
            out.bbox += (1.0 - iou) * inv_pos;
            for r in 0..4 {
                let g: f64 = (0..4).map(|corner| diou[corner] * jac[corner][r]).sum();
                grads[pos.level][at(1 + k + r)] -= weights.bbox * g * inv_pos;
            }
        }
    }
    out.total = weights.obj * out.obj + weights.cls * out.cls + weights.bbox * out.bbox;
    if !out.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss obj={} cls={} box={}",
            out.obj, out.cls, out.bbox
        )));
    }
    let grads = grads
        .into_iter()
        .map(|g| g.into_iter().map(E::of).collect())
        .collect();
    let loss = ctx.scoped("loss", |ctx| ctx.graph.precomputed_scalar(preds, E::of(out.total), grads))?;
    Ok((loss, out))
}

// ------------------------------------------------------------- decode

/// Raw per-level predictions for one batch, as plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPredictions {
    pub num_classes: usize,
    pub image_size: usize,
    /// `(stride, [N, 5+K, H, W] values)` per level.
    pub levels: Vec<(usize, Vec<usize>, Vec<f64>)>,
}

impl RawPredictions {
    pub fn from_graph<E: Element>(
        g: &crate::graph::Graph<E>,
        preds: &[Var],
        strides: &[usize],
        num_classes: usize,
        image_size: usize,
    ) -> Self {
        RawPredictions {
            num_classes,
            image_size,
            levels: preds
                .iter()
                .zip(strides)
                .map(|(&p, &s)| (s, g.shape(p).to_vec(), g.value(p).iter().map(|v| v.f64()).collect()))
                .collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.levels.first().map_or(0, |(_, d, _)| d[0])
    }

    /// Logits that decode exactly to the given targets: saturated
    /// objectness and class on positive cells, inverse-encoded boxes.
    pub fn from_targets(targets: &TargetMap, image_size: usize, saturation: f64) -> Self {
        let k = targets.num_classes;
        let mut levels: Vec<(usize, Vec<usize>, Vec<f64>)> = targets
            .levels
            .iter()
            .map(|lt| {
                let shape = vec![targets.batch, 5 + k, lt.h, lt.w];
                let mut v = vec![-saturation; shape.iter().product()];
                let hw = lt.h * lt.w;
                for img in 0..targets.batch {
                    for ch in 1 + k..5 + k {
                        v[(img * (5 + k) + ch) * hw..(img * (5 + k) + ch + 1) * hw].fill(0.0);
                    }
                }
                (lt.stride, shape, v)
            })
            .collect();
        let logit = |p: f64| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            (p / (1.0 - p)).ln()
        };
        for pos in &targets.positives {
            let lt = &targets.levels[pos.level];
            let hw = lt.h * lt.w;
            let v = &mut levels[pos.level].2;
            let at = |ch: usize| (pos.image * (5 + k) + ch) * hw + pos.gy * lt.w + pos.gx;
            v[at(0)] = saturation;
            v[at(1 + pos.class_id)] = saturation;
            v[at(1 + k)] = logit(pos.target[0]);
            v[at(2 + k)] = logit(pos.target[1]);
            v[at(3 + k)] = pos.target[2];
            v[at(4 + k)] = pos.target[3];
        }
        RawPredictions {
            num_classes: k,
            image_size,
            levels,
        }
    }
}

/// Detections per image. Score is `σ(obj)·σ(best class)`; cells with score
/// above `conf` are kept, and every cell is kept when `conf` is 0.
pub fn decode(raw: &RawPredictions, conf: f64) -> Vec<Vec<Detection>> {
    let k = raw.num_classes;
    let lim = raw.image_size as f64;
    let mut out = vec![Vec::new(); raw.batch()];
    for (stride, shape, v) in &raw.levels {
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        for (img, dets) in out.iter_mut().enumerate().take(n) {
            for gy in 0..h {
                for gx in 0..w {
                    let at = |ch: usize| img * c * hw + ch * hw + gy * w + gx;
                    let (mut best, mut best_z) = (0, f64::NEG_INFINITY);
                    for cls in 0..k {
                        if v[at(1 + cls)] > best_z {
                            best = cls;
                            best_z = v[at(1 + cls)];
                        }
                    }
                    let score = sigmoid(v[at(0)]) * sigmoid(best_z);
                    if conf > 0.0 && score <= conf {
                        continue;
                    }
                    let rawb = [v[at(1 + k)], v[at(2 + k)], v[at(3 + k)], v[at(4 + k)]];
                    let (b, _) = decode_cell(rawb, gy, gx, *stride as f64);
                    dets.push(Detection {
                        class_id: best,
                        score,
                        bbox: [b[0].max(0.0), b[1].max(0.0), b[2].min(lim), b[3].min(lim)],
                    });
                }
            }
        }
    }
    out
}

/// Descending score, then ascending box coordinates.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| {
            a.bbox
                .iter()
                .zip(&b.bbox)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.class_id.cmp(&b.class_id))
}

/// Greedy per-class NMS: a detection is dropped when it overlaps an already
/// kept detection of its class with IoU above `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept
            .iter()
            .all(|q| q.class_id != d.class_id || boxes::iou(&q.bbox, &d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(class_id: usize, bbox: BBox) -> Annotation {
        Annotation { class_id, bbox }
    }

    #[test]
    fn centered_small_box_lands_on_p3() {
        let t = assign_targets(&[vec![ann(0, [120.0, 120.0, 136.0, 136.0])]], 256, &[8, 16, 32], 3).unwrap();
        assert_eq!(t.positives.len(), 1);
        let p = t.positives[0];
        assert_eq!((p.level, p.gy, p.gx), (0, 16, 16));
        assert_eq!(t.levels[0].obj.iter().filter(|&&v| v > 0.0).count(), 1);
    }

    #[test]
    fn empty_ground_truth_is_all_negative() {
        let t = assign_targets(&[vec![], vec![]], 64, &[8, 16, 32], 3).unwrap();
        assert!(t.positives.is_empty());
        assert!(t.levels.iter().all(|l| l.obj.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn degenerate_boxes_are_counted() {
        let gts = vec![vec![ann(0, [5.0, 5.0, 5.0, 9.0]), ann(1, [1.0, 1.0, 9.0, 9.0])]];
        let t = assign_targets(&gts, 64, &[8, 16, 32], 3).unwrap();
        assert_eq!(t.degenerate, 1);
        assert_eq!(t.positives.len(), 1);
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let gts = vec![vec![ann(0, [50.0, 5.0, 70.0, 9.0])]];
        assert!(matches!(assign_targets(&gts, 64, &[8, 16, 32], 3), Err(Error::Usage(_))));
    }

    #[test]
    fn collisions_move_to_nearest_free_cell() {
        let b = [10.0, 10.0, 14.0, 14.0];
        let t = assign_targets(&[vec![ann(0, b), ann(1, b)]], 64, &[8, 16, 32], 3).unwrap();
        assert_eq!(t.positives.len(), 2);
        let cells: Vec<_> = t.positives.iter().map(|p| (p.gy, p.gx)).collect();
        assert_eq!(cells[0], (1, 1));
        assert_ne!(cells[0], cells[1]);
        assert_eq!(cells[1].0.abs_diff(1) + cells[1].1.abs_diff(1), 1);
    }

    #[test]
    fn bands_scale_with_input() {
        assert_eq!(level_for_box(&[0.0, 0.0, 24.0, 24.0], 256, 3), 0);
        assert_eq!(level_for_box(&[0.0, 0.0, 25.0, 25.0], 256, 3), 1);
        assert_eq!(level_for_box(&[0.0, 0.0, 64.0, 64.0], 256, 3), 1);
        assert_eq!(level_for_box(&[0.0, 0.0, 65.0, 65.0], 256, 3), 2);
        assert_eq!(level_for_box(&[0.0, 0.0, 6.0, 6.0], 64, 3), 0);
        assert_eq!(level_for_box(&[0.0, 0.0, 16.0, 16.0], 64, 3), 1);
        assert_eq!(level_for_box(&[0.0, 0.0, 17.0, 17.0], 64, 3), 2);
    }

    #[test]
    fn decode_cell_inverts_encoding() {
        let t = [0.3, 0.7, (20.0f64 / 8.0).ln(), (10.0f64 / 8.0).ln()];
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let (b, _) = decode_cell([logit(t[0]), logit(t[1]), t[2], t[3]], 2, 5, 8.0);
        let cx = (5.0 + 0.3) * 8.0;
        let cy = (2.0 + 0.7) * 8.0;
        let want = [cx - 10.0, cy - 5.0, cx + 10.0, cy + 5.0];
        for (a, w) in b.iter().zip(want) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_is_stable() {
        assert!((bce_logits(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_logits(800.0, 1.0).abs() < 1e-300);
        assert!((bce_logits(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn iou_grad_matches_finite_difference() {
        let p = [1.0, 2.0, 7.5, 6.0];
        let g = [2.0, 1.0, 6.0, 8.0];
        let (_, grad) = iou_with_grad(&p, &g);
        for k in 0..4 {
            let mut a = p;
            let mut b = p;
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let num = (boxes::iou(&a, &g) - boxes::iou(&b, &g)) / 2e-6;
            assert!((num - grad[k]).abs() < 1e-8, "{k}: {num} vs {}", grad[k]);
        }
    }

    #[test]
    fn nms_examples() {
        let d = |s, b| Detection {
            class_id: 0,
            score: s,
            bbox: b,
        };
        let b = [0.0, 0.0, 10.0, 10.0];
        let kept = nms(&[d(0.8, b), d(0.9, b)], 0.65);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let disjoint = [d(0.5, b), d(0.6, [20.0, 20.0, 30.0, 30.0]), d(0.7, [40.0, 0.0, 50.0, 5.0])];
        assert_eq!(nms(&disjoint, 0.65).len(), 3);
    }

    #[test]
    fn nms_keeps_other_classes() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let dets = [
            Detection {
                class_id: 0,
                score: 0.9,
                bbox: b,
            },
            Detection {
                class_id: 1,
                score: 0.8,
                bbox: b,
            },
        ];
        assert_eq!(nms(&dets, 0.65).len(), 2);
    }
}
