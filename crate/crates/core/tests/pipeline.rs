//! End-to-end behaviour of data, targets, decoding, evaluation and training.

use std::collections::BTreeSet;

use pnk::boxes::{iou, SizeBand};
use pnk::config::ExperimentConfig;
use pnk::data::{self, mask_bbox, shape_mask, Dataset, DatasetSpec, ShapeClass};
use pnk::detector::{assign_targets, decode, nms, RawPredictions};
use pnk::metrics::{average_precision, coco_iou_thresholds};
use pnk::model::{Detector, ModelSpec};
use pnk::necks::NeckKind;
use pnk::params::{Ctx, Mode};
use pnk::{train, Error, Tensor};

const STRIDES: [usize; 3] = [8, 16, 32];

#[test]
fn band_mix_is_respected() {
    let mut spec = DatasetSpec::new(5, 400, 64);
    spec.mix = [0.5, 0.3, 0.2];
    let (ds, stats) = data::generate(&spec).unwrap();
    let h = ds.band_histogram();
    let total: usize = h.iter().sum();
    assert_eq!(total, stats.objects);
    for (got, want) in h.iter().zip(spec.mix) {
        let f = *got as f64 / total as f64;
        assert!((f - want).abs() < 0.06, "{h:?} vs {:?}", spec.mix);
    }
    spec.mix = [1.0, 0.0, 0.0];
    let (ds, _) = data::generate(&spec).unwrap();
    assert_eq!(ds.band_histogram()[1..], [0, 0]);
}

#[test]
fn boxes_are_tight_around_the_drawn_shapes() {
    // sixteen samples per pixel side at 64 px, eight at 128 px
    for (size, ss) in [(64, 16), (128, 8)] {
        let (ds, _) = data::generate(&DatasetSpec::new(2, 20, size)).unwrap();
        for r in &ds.records {
            for a in &r.annotations {
                let class = ShapeClass::from_id(a.class_id).unwrap();
                let m = shape_mask(class, &a.bbox, size, ss);
                let tight = mask_bbox(&m, size, ss).unwrap();
                assert!(iou(&tight, &a.bbox) > 0.9, "{class:?} {:?} vs {tight:?}", a.bbox);
            }
        }
    }
}

#[test]
fn objects_are_visible_in_the_image() {
    // the mean intensity inside a box differs from the background
    let (ds, _) = data::generate(&DatasetSpec::new(9, 20, 64)).unwrap();
    for r in &ds.records {
        let img = r.image.data();
        for a in &r.annotations {
            let [x1, y1, x2, y2] = a.bbox.map(|v| v as usize);
            let inside: Vec<f32> = (y1..y2.min(64))
                .flat_map(|y| (x1..x2.min(64)).map(move |x| (y, x)))
                .flat_map(|(y, x)| (0..3).map(move |c| img[c * 64 * 64 + y * 64 + x]))
                .collect();
            let spread = inside.iter().copied().fold(f32::MIN, f32::max) - inside.iter().copied().fold(f32::MAX, f32::min);
            assert!(spread > 0.2, "flat box {:?}", a.bbox);
        }
    }
}

#[test]
fn truncated_dataset_file_is_a_format_error() {
    let (ds, _) = data::generate(&DatasetSpec::new(1, 3, 64)).unwrap();
    let bytes = data::to_bytes(&ds).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("cut.bin");
    std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
    let e = data::read_dataset(&p).unwrap_err();
    assert!(matches!(e, Error::Format { .. }), "{e}");
    assert_eq!(e.exit_code(), 1);
    let e = data::read_dataset(tmp.path().join("missing.bin")).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn perfect_predictions_score_one() {
    let (ds, _) = data::generate(&DatasetSpec::new(4, 40, 64)).unwrap();
    let all = ds.annotations();
    let targets = assign_targets(&all, 64, &STRIDES, 3).unwrap();
    // a box moved off its center cell by a collision has an offset the
    // sigmoid cannot reach, so only images without moves are exact
    let moved = |p: &pnk::detector::Positive| !(0.0..1.0).contains(&p.target[0]) || !(0.0..1.0).contains(&p.target[1]);
    let clean: Vec<usize> = (0..all.len())
        .filter(|&i| !targets.positives.iter().any(|p| p.image == i && moved(p)))
        .collect();
    assert!(clean.len() >= 30, "only {} clean images", clean.len());
    let gts: Vec<_> = clean.iter().map(|&i| all[i].clone()).collect();
    let targets = assign_targets(&gts, 64, &STRIDES, 3).unwrap();
    assert_eq!(targets.positives.len(), gts.iter().map(Vec::len).sum::<usize>());
    let raw = RawPredictions::from_targets(&targets, 64, 12.0);
    let dets: Vec<_> = decode(&raw, 0.5).iter().map(|d| nms(d, 0.65)).collect();
    for (d, g) in dets.iter().zip(&gts) {
        assert_eq!(d.len(), g.len());
        for a in g {
            assert!(
                d.iter().any(|x| x.class_id == a.class_id && iou(&x.bbox, &a.bbox) > 0.999),
                "{a:?} not in {d:?}"
            );
        }
    }
    let rep = average_precision(&dets, &gts, &coco_iou_thresholds(), 0.25, 3, 64);
    assert_eq!(rep.ap50, 1.0);
    assert!(rep.ap > 0.999);
}

#[test]
fn colliding_boxes_still_get_a_cell() {
    // two same-level boxes with one center cell
    let a = |x: f64, c| pnk::boxes::Annotation { class_id: c, bbox: [x, 20.0, x + 10.0, 30.0] };
    let t = assign_targets(&[vec![a(18.0, 0), a(19.0, 1)]], 64, &STRIDES, 3).unwrap();
    assert_eq!(t.positives.len(), 2);
    let (p, q) = (t.positives[0], t.positives[1]);
    assert_eq!((p.level, q.level), (1, 1));
    assert_ne!((p.gy, p.gx), (q.gy, q.gx));
    assert_eq!(t.levels[1].obj.iter().filter(|&&v| v > 0.0).count(), 2);
}

#[test]
fn higher_confidence_decodes_a_subset() {
    let (ds, _) = data::generate(&DatasetSpec::new(6, 4, 64)).unwrap();
    let targets = assign_targets(&ds.annotations(), 64, &STRIDES, 3).unwrap();
    let mut raw = RawPredictions::from_targets(&targets, 64, 3.0);
    // blur the logits so many cells sit between the thresholds
    for (_, _, v) in &mut raw.levels {
        for (i, x) in v.iter_mut().enumerate() {
            *x += ((i * 37 % 11) as f64 - 5.0) * 0.4;
        }
    }
    let lo = decode(&raw, 0.001);
    let hi = decode(&raw, 0.25);
    for (l, h) in lo.iter().zip(&hi) {
        assert!(h.len() <= l.len());
        assert!(h.iter().all(|d| l.contains(d) && d.score > 0.25));
    }
    assert_eq!(decode(&raw, 0.0)[0].len(), 8 * 8 + 4 * 4 + 2 * 2);
}

#[test]
fn empty_validation_set_evaluates_to_zero() {
    let cfg = ExperimentConfig::default();
    let (model, store) = Detector::build::<f32>(&cfg.model_spec(), 0).unwrap();
    let empty = Dataset { image_size: 64, records: vec![] };
    let rep = train::evaluate(&model, &store, &empty, 0.25, 0.65).unwrap();
    assert_eq!((rep.ap, rep.ap50, rep.num_gt, rep.num_detections), (0.0, 0.0, 0, 0));
}

#[test]
fn short_training_run_reduces_loss() {
    let mut cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.ini")).unwrap();
    for (k, v) in [("epochs", "3"), ("warmup_epochs", "1")] {
        cfg.set("train", k, v).unwrap();
    }
    cfg.set("data", "train_count", "64").unwrap();
    cfg.set("data", "val_count", "8").unwrap();
    let (tr, val) = train::load_splits(&cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut log = Vec::new();
    let out = train::train(&cfg, &tr, &val, Some(tmp.path()), &mut log).unwrap();
    let l: Vec<f64> = out.epochs.iter().map(|e| e.loss.total).collect();
    assert!(l.iter().all(|v| v.is_finite()));
    assert!(l[2] < l[0], "{l:?}");
    assert!(tmp.path().join("final.pnkc").exists() && tmp.path().join("best.pnkc").exists());
    let text = String::from_utf8(log).unwrap();
    assert!(text.lines().any(|line| line.starts_with("epoch=3 loss=")));
}

fn tiny(neck: NeckKind) -> ModelSpec {
    let mut cfg = ExperimentConfig::default();
    cfg.set("model", "backbone_widths", "4,8,8,16,16").unwrap();
    cfg.set("model", "head_width", "8").unwrap();
    cfg.set("model", "neck", neck.name()).unwrap();
    cfg.model_spec()
}

/// Backbone stages each head output depends on, read off the traced graph.
fn head_lineage(neck: NeckKind) -> Vec<BTreeSet<String>> {
    let (model, mut store) = Detector::build::<f64>(&tiny(neck), 0).unwrap();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let outs = model.forward(&mut ctx, Tensor::zeros(&[1, 3, 64, 64])).unwrap();
    let info = ctx.graph.info();
    let mut tags: Vec<BTreeSet<String>> = Vec::with_capacity(info.len());
    for n in &info {
        let t = if let Some(rest) = n.scope.strip_prefix("backbone/") {
            BTreeSet::from([rest.split('/').next().unwrap().to_string()])
        } else {
            n.inputs.iter().flat_map(|v| tags[v.index()].iter().cloned()).collect()
        };
        tags.push(t);
    }
    outs.iter().map(|v| tags[v.index()].clone()).collect()
}

#[test]
fn ihp_heads_see_one_level_each() {
    let ihp = head_lineage(NeckKind::Ihp);
    assert!(ihp.iter().all(|t| t.len() == 1), "{ihp:?}");
    assert_eq!(ihp.iter().collect::<BTreeSet<_>>().len(), 3);
    let none = head_lineage(NeckKind::None);
    assert_eq!(ihp, none);
    for neck in [NeckKind::Fpn, NeckKind::PanetSimplified, NeckKind::Sa] {
        let l = head_lineage(neck);
        assert_eq!(l[0].len(), 3, "{neck:?} P3 head should see every level: {l:?}");
    }
    // only the bottom-up necks carry P3 information to the P5 head
    assert_eq!(head_lineage(NeckKind::Fpn)[2].len(), 1);
    assert_eq!(head_lineage(NeckKind::PanetSimplified)[2].len(), 3);
}

#[test]
fn every_neck_keeps_pyramid_geometry() {
    for neck in [NeckKind::None, NeckKind::Ihp, NeckKind::Fpn, NeckKind::PanetSimplified, NeckKind::Sa] {
        let spec = tiny(neck);
        let (model, mut store) = Detector::build::<f32>(&spec, 0).unwrap();
        let mut ctx = Ctx::new(&mut store, Mode::Eval);
        let outs = model.forward(&mut ctx, Tensor::zeros(&[2, 3, 64, 64])).unwrap();
        for (v, s) in outs.iter().zip(STRIDES) {
            assert_eq!(ctx.graph.shape(*v), &[2, 5 + 3, 64 / s, 64 / s], "{neck:?}");
        }
    }
}

#[test]
fn band_edges_follow_image_size() {
    assert_eq!(SizeBand::edges(256), [24.0, 64.0]);
    assert_eq!(SizeBand::edges(64), [6.0, 16.0]);
    let spec = DatasetSpec::new(0, 1, 64);
    for band in SizeBand::ALL {
        let (lo, hi) = spec.side_range(band);
        assert!(lo < hi, "{band:?}");
        assert_eq!(SizeBand::of_side(lo, 64), band);
    }
}
