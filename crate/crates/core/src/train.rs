//! Seeded training loop and evaluation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::Detection;
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{self, Dataset};
use crate::detector::{self, assign_targets, compute_loss, LossBreakdown, LossWeights, RawPredictions};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::model::Detector;
use crate::optim::Sgd;
use crate::params::{Ctx, Mode, ParamStore};

/// Final learning rate as a fraction of the initial one.
pub const LR_FINAL_FRACTION: f64 = 0.01;
pub const EVAL_BATCH: usize = 32;

/// Linear warmup, then cosine decay from `lr` to `lr·LR_FINAL_FRACTION`.
pub fn learning_rate(lr: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    let lo = lr * LR_FINAL_FRACTION;
    lo + 0.5 * (lr - lo) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub val_ap50: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Detector,
    pub store: ParamStore<f32>,
    pub epochs: Vec<EpochLog>,
    pub best_ap50: f64,
    pub best_epoch: usize,
    pub velocity: Vec<Vec<f32>>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.loss.total)
    }
}

/// Loads or synthesizes the train and val splits named by the config.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let split = |path: &Option<std::path::PathBuf>, idx: u64, count: usize| -> Result<Dataset> {
        match path {
            Some(p) => data::read_dataset(p),
            None => Ok(data::generate(&cfg.dataset_spec(idx, count))?.0),
        }
    };
    let train = split(&cfg.data.train, 0, cfg.data.train_count)?;
    let val = split(&cfg.data.val, 1, cfg.data.val_count)?;
    Ok((train, val))
}

fn grad_norms(store: &ParamStore<f32>) -> Vec<(String, f64)> {
    let mut norms: Vec<(String, f64)> = store
        .params()
        .iter()
        .zip(store.param_names())
        .map(|(p, n)| {
            let g = p.grad().map_or(0.0, |g| g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt());
            (n.clone(), g)
        })
        .collect();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
    norms
}

pub fn train(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    out_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if train_ds.image_size != cfg.data.image_size {
        return Err(Error::config(format!(
            "dataset image size {} differs from config {}",
            train_ds.image_size, cfg.data.image_size
        )));
    }
    let t = &cfg.train;
    let (model, mut store) = Detector::build::<f32>(&cfg.model_spec(), t.seed)?;
    let strides = model.strides();
    let k = cfg.model.num_classes;
    let size = train_ds.image_size;
    let mut opt = Sgd::<f32>::new(t.lr, t.momentum, t.wd);
    let batches_per_epoch = train_ds.len().div_ceil(t.batch);
    let total_steps = batches_per_epoch * t.epochs;
    let warmup = (batches_per_epoch * t.warmup_epochs).min(total_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(0x7472_6169_6e);
    let mut epochs = Vec::with_capacity(t.epochs);
    let (mut best_ap50, mut best_epoch) = (f64::NEG_INFINITY, 0);
    let mut step = 0;
    let _ = writeln!(log, "event=config hash={}", cfg.hash());
    for line in cfg.render().lines().filter(|l| !l.is_empty()) {
        let _ = writeln!(log, "config {line}");
    }
    for epoch in 1..=t.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = (0..order.len()).map(|_| t.flip && rng.gen_bool(0.5)).collect();
        let mut sum = LossBreakdown::default();
        let mut lr = t.lr;
        for (b, (idx, flip)) in order.chunks(t.batch).zip(flips.chunks(t.batch)).enumerate() {
            let (images, gts) = data::batch(train_ds, idx, flip);
            let targets = assign_targets(&gts, size, &strides, k)?;
            lr = learning_rate(t.lr, step, warmup, total_steps);
            opt.lr = lr;
            let mut ctx = Ctx::new(&mut store, Mode::Train);
            ctx.graph.set_check_finite(false);
            let preds = model.forward(&mut ctx, images)?;
            let (loss, parts) = match compute_loss(&mut ctx, &preds, &targets, LossWeights::default()) {
                Ok(v) => v,
                Err(Error::NonFinite(what)) => {
                    return Err(Error::NonFinite(format!(
                        "{what} at epoch {epoch} batch {b}; largest grad norms from the previous step: {:?}",
                        &grad_norms(ctx.store())[..5.min(ctx.store().params().len())]
                    )))
                }
                Err(e) => return Err(e),
            };
            ctx.backward(loss)?;
            drop(ctx);
            if store.params().iter().any(|p| p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
                let norms = grad_norms(&store);
                return Err(Error::NonFinite(format!(
                    "gradient at epoch {epoch} batch {b} (loss {}); largest grad norms: {:?}",
                    parts.total,
                    &norms[..5.min(norms.len())]
                )));
            }
            opt.step(store.params_mut())?;
            let w = idx.len() as f64;
            sum.total += parts.total * w;
            sum.obj += parts.obj * w;
            sum.cls += parts.cls * w;
            sum.bbox += parts.bbox * w;
            sum.positives += parts.positives;
            step += 1;
        }
        let n = train_ds.len() as f64;
        let mean = LossBreakdown {
            total: sum.total / n,
            obj: sum.obj / n,
            cls: sum.cls / n,
            bbox: sum.bbox / n,
            positives: sum.positives,
        };
        let val_ap50 = if val_ds.is_empty() {
            0.0
        } else {
            evaluate(&model, &store, val_ds, cfg.eval.conf.min(0.001), cfg.eval.nms_iou)?.ap50
        };
        let seconds = t0.elapsed().as_secs_f64();
        let _ = writeln!(
            log,
            "epoch={epoch} loss={:.6} obj={:.6} cls={:.6} box={:.6} lr={lr:.6} val_ap50={val_ap50:.4} time_s={seconds:.1}",
            mean.total, mean.obj, mean.cls, mean.bbox
        );
        let _ = log.flush();
        epochs.push(EpochLog {
            epoch,
            loss: mean,
            lr,
            val_ap50,
            seconds,
        });
        if val_ap50 > best_ap50 {
            best_ap50 = val_ap50;
            best_epoch = epoch;
            if let Some(dir) = out_dir {
                Checkpoint::new(cfg, epoch as u32, &store, Some(opt.velocity())).save(dir.join("best.pnkc"))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        Checkpoint::new(cfg, t.epochs as u32, &store, Some(opt.velocity())).save(dir.join("final.pnkc"))?;
    }
    Ok(TrainOutcome {
        model,
        store,
        epochs,
        best_ap50,
        best_epoch,
        velocity: opt.velocity().to_vec(),
    })
}

/// Raw predictions for every image, in batches.
pub fn predict(model: &Detector, store: &ParamStore<f32>, ds: &Dataset) -> Result<Vec<RawPredictions>> {
    let k = model.spec.num_classes;
    let mut store = store.clone();
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, _) = data::batch(ds, chunk, &[]);
        let mut ctx = Ctx::new(&mut store, Mode::Eval);
        ctx.graph.set_check_finite(false);
        let preds = model.forward(&mut ctx, images)?;
        out.push(RawPredictions::from_graph(&ctx.graph, &preds, &model.strides(), k, ds.image_size));
    }
    Ok(out)
}

/// Decoded, NMS'd detections per image.
pub fn detect(raw: &[RawPredictions], conf: f64, nms_iou: f64) -> Vec<Vec<Detection>> {
    raw.iter()
        .flat_map(|r| detector::decode(r, conf))
        .map(|d| detector::nms(&d, nms_iou))
        .collect()
}

pub fn evaluate(model: &Detector, store: &ParamStore<f32>, ds: &Dataset, conf: f64, nms_iou: f64) -> Result<EvalReport> {
    let raw = predict(model, store, ds)?;
    Ok(metrics::average_precision(
        &detect(&raw, conf, nms_iou),
        &ds.annotations(),
        &metrics::coco_iou_thresholds(),
        conf,
        model.spec.num_classes,
        ds.image_size,
    ))
}

/// Evaluation at a low and a high confidence threshold from one set of
/// predictions. The high-threshold detections are the low-threshold ones
/// filtered by score, so its AP can never exceed the low one.
pub fn threshold_study(
    model: &Detector,
    store: &ParamStore<f32>,
    ds: &Dataset,
    low: f64,
    high: f64,
    nms_iou: f64,
) -> Result<(EvalReport, EvalReport)> {
    let raw = predict(model, store, ds)?;
    let dets = detect(&raw, low, nms_iou);
    let gts = ds.annotations();
    let thr = metrics::coco_iou_thresholds();
    let k = model.spec.num_classes;
    Ok((
        metrics::average_precision(&dets, &gts, &thr, low, k, ds.image_size),
        metrics::average_precision(&dets, &gts, &thr, high, k, ds.image_size),
    ))
}
