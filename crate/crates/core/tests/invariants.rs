//! Property tests over randomized inputs.

use proptest::prelude::*;

use pnk::blocks::{sni_upsample, AlphaMode, UpsampleSpec};
use pnk::boxes::{hflip, iou, Annotation, BBox, Detection};
use pnk::checkpoint::Checkpoint;
use pnk::config::ExperimentConfig;
use pnk::data::{self, DatasetSpec};
use pnk::detector::nms;
use pnk::kernels::conv::Conv2dConfig;
use pnk::metrics::{average_precision, coco_iou_thresholds};
use pnk::model::Detector;
use pnk::train::learning_rate;
use pnk::{Graph, Tensor};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..56.0f64, 0.0..56.0f64, 1.0..40.0f64, 1.0..40.0f64)
        .prop_map(|(x, y, w, h)| [x, y, (x + w).min(64.0), (y + h).min(64.0)])
}

fn detection() -> impl Strategy<Value = Detection> {
    (bbox(), 0.0..1.0f64, 0..3usize).prop_map(|(bbox, score, class_id)| Detection { class_id, score, bbox })
}

fn tensor(max_c: usize, max_hw: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_c, 1..=max_hw, 1..=max_hw).prop_flat_map(|(c, h, w)| {
        proptest::collection::vec(-3.0..3.0f64, c * h * w)
            .prop_map(move |v| Tensor::from_vec(&[1, c, h, w], v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (p, q) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(p, q);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hflip_preserves_iou(a in bbox(), b in bbox()) {
        let d = iou(&hflip(&a, 64.0), &hflip(&b, 64.0)) - iou(&a, &b);
        prop_assert!(d.abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_a_separated_subset(dets in proptest::collection::vec(detection(), 0..25), thr in 0.1..0.9f64) {
        let kept = nms(&dets, thr);
        prop_assert!(kept.iter().all(|k| dets.contains(k)));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= thr);
                prop_assert!(a.score >= b.score);
            }
        }
        prop_assert_eq!(nms(&kept, thr), kept.clone());
        // the best detection always survives
        if let Some(top) = dets.iter().map(|d| d.score).reduce(f64::max) {
            prop_assert_eq!(kept[0].score, top);
        }
    }

    #[test]
    fn ap_is_bounded_and_monotone_in_threshold(
        dets in proptest::collection::vec(detection(), 0..12),
        gts in proptest::collection::vec((bbox(), 0..3usize), 1..6),
        conf in 0.05..0.9f64,
    ) {
        let gts = vec![gts.into_iter().map(|(bbox, class_id)| Annotation { class_id, bbox }).collect::<Vec<_>>()];
        let dets = vec![dets];
        let thr = coco_iou_thresholds();
        let lo = average_precision(&dets, &gts, &thr, 0.0, 3, 64);
        let hi = average_precision(&dets, &gts, &thr, conf, 3, 64);
        for v in [lo.ap, lo.ap50, lo.ap_small, lo.ap_medium, lo.ap_large] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(lo.ap >= hi.ap && lo.ap50 >= hi.ap50);
        prop_assert!(lo.ap_small >= hi.ap_small && lo.ap_medium >= hi.ap_medium && lo.ap_large >= hi.ap_large);
        prop_assert!(lo.ap50 >= lo.ap);
    }

    #[test]
    fn sni_preserves_total_mass(x in tensor(3, 6), s in 1usize..5) {
        let mut g = Graph::new();
        let v = g.leaf(&x);
        let y = sni_upsample(&mut g, v, UpsampleSpec::new(s, AlphaMode::Area).unwrap()).unwrap();
        let (a, b): (f64, f64) = (x.data().iter().sum(), g.value(y).iter().sum());
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn channel_shuffle_permutes_values(x in tensor(8, 4), groups in 1usize..5) {
        let c = x.shape()[1];
        prop_assume!(c % groups == 0);
        let mut g = Graph::new();
        let v = g.leaf(&x);
        let y = g.channel_shuffle(v, groups).unwrap();
        let mut a = x.data().to_vec();
        let mut b = g.value(y).to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn conv_is_linear_in_its_input(x in tensor(3, 6), k in prop_oneof![Just(1usize), Just(3)], a in -2.0..2.0f64) {
        let c = x.shape()[1];
        let w = Tensor::<f64>::from_vec(&[2, c, k, k], (0..2 * c * k * k).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let xs = Tensor::from_vec(x.shape(), x.data().iter().map(|v| a * v).collect()).unwrap();
        let mut g = Graph::new();
        let (xv, xsv, wv) = (g.leaf(&x), g.leaf(&xs), g.leaf(&w));
        let cfg = Conv2dConfig::new(1, k / 2, 1);
        let y = g.conv2d(xv, wv, None, cfg).unwrap();
        let ys = g.conv2d(xsv, wv, None, cfg).unwrap();
        for (p, q) in g.value(y).iter().zip(g.value(ys)) {
            prop_assert!((a * p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn learning_rate_stays_in_range(step in 0usize..2000, warmup in 0usize..200) {
        let lr = learning_rate(0.01, step, warmup, 1000);
        prop_assert!(lr > 0.0 && lr <= 0.01 + 1e-15);
        if step >= warmup {
            prop_assert!(lr >= 0.0001 - 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dataset_bytes_round_trip(seed in 0u64..1000, count in 1usize..4, size in prop_oneof![Just(64usize), Just(128)]) {
        let (ds, _) = data::generate(&DatasetSpec::new(seed, count, size)).unwrap();
        let bytes = data::to_bytes(&ds).unwrap();
        let back = data::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(data::to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in 0u64..1000, neck in prop_oneof![Just("ihp"), Just("fpn"), Just("sa")]) {
        let mut cfg = ExperimentConfig::default();
        cfg.set("model", "backbone_widths", "4,8,8,16,16").unwrap();
        cfg.set("model", "head_width", "8").unwrap();
        cfg.set("model", "neck", neck).unwrap();
        let (_, store) = Detector::build::<f32>(&cfg.model_spec(), seed).unwrap();
        let bytes = Checkpoint::new(&cfg, 1, &store, None).to_bytes();
        let (cfg2, _, store2) = Checkpoint::from_bytes(&bytes).unwrap().restore().unwrap();
        prop_assert_eq!(cfg2, cfg);
        prop_assert_eq!(store2.param_names(), store.param_names());
        for (p, q) in store.params().iter().zip(store2.params()) {
            prop_assert!(p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
