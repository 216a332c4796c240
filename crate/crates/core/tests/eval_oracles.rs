//! NMS and AP against brute-force references on small random fixtures.

mod common;

use common::{ap_reference, mean, nms_reference, random_box, random_dets};
use pnk::boxes::{Annotation, BBox, Detection, SizeBand};
use pnk::detector::nms;
use pnk::metrics::{average_precision, coco_iou_thresholds};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: u64 = 100;
const SIZE: usize = 64;

#[test]
fn nms_matches_brute_force() {
    for case in 0..CASES {
        let mut r = ChaCha8Rng::seed_from_u64(case);
        let seeds: Vec<BBox> = (0..3).map(|_| random_box(&mut r)).collect();
        let n = r.gen_range(0..=10);
        let mut dets = random_dets(&mut r, n, 2, &seeds);
        if n > 1 && r.gen_bool(0.3) {
            // exact duplicate, different class
            let mut d = dets[0];
            d.class_id = 1 - d.class_id;
            dets.push(d);
        }
        let thr = [0.3, 0.5, 0.65][r.gen_range(0..3)];
        assert_eq!(nms(&dets, thr), nms_reference(&dets, thr), "case {case}");
    }
}

#[test]
fn ap_matches_brute_force() {
    let thrs = coco_iou_thresholds();
    for case in 0..CASES {
        let mut r = ChaCha8Rng::seed_from_u64(500 + case);
        let classes = r.gen_range(1..=3);
        let images = r.gen_range(1..=3);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        let mut budget = 10;
        for _ in 0..images {
            let g: Vec<Annotation> = (0..r.gen_range(0..=4))
                .map(|_| Annotation { class_id: r.gen_range(0..classes), bbox: random_box(&mut r) })
                .collect();
            let boxes: Vec<BBox> = g.iter().map(|a| a.bbox).collect();
            let n = r.gen_range(0..=budget.min(5));
            budget -= n;
            dets.push(random_dets(&mut r, n, classes, &boxes));
            gts.push(g);
        }
        let conf = [0.0, 0.25, 0.5][r.gen_range(0..3)];
        let report = average_precision(&dets, &gts, &thrs, conf, classes, SIZE);

        let kept: Vec<Vec<Detection>> = dets
            .iter()
            .map(|d| d.iter().filter(|x| conf <= 0.0 || x.score > conf).copied().collect())
            .collect();
        let class_ap = |c: usize, ts: &[f64], band: Option<SizeBand>| -> Option<f64> {
            let aps: Vec<f64> = ts.iter().filter_map(|&t| ap_reference(&kept, &gts, c, t, band, SIZE)).collect();
            (!aps.is_empty()).then(|| mean(&aps))
        };
        let over = |ts: &[f64], band: Option<SizeBand>| -> f64 {
            let v: Vec<f64> = (0..classes).filter_map(|c| class_ap(c, ts, band)).collect();
            mean(&v)
        };
        let per_class: Vec<Option<f64>> = (0..classes).map(|c| class_ap(c, &thrs, None)).collect();
        assert_eq!(report.per_class, per_class, "case {case}");
        assert_eq!(report.ap, over(&thrs, None), "case {case}");
        assert_eq!(report.ap50, over(&[0.5], None), "case {case}");
        assert_eq!(report.ap_small, over(&thrs, Some(SizeBand::Small)), "case {case}");
        assert_eq!(report.ap_medium, over(&thrs, Some(SizeBand::Medium)), "case {case}");
        assert_eq!(report.ap_large, over(&thrs, Some(SizeBand::Large)), "case {case}");
    }
}

#[test]
fn hand_worked_ap() {
    // two GTs, three detections: TP at 0.9, FP at 0.8, TP at 0.7
    let gt = vec![vec![
        Annotation { class_id: 0, bbox: [0.0, 0.0, 20.0, 20.0] },
        Annotation { class_id: 0, bbox: [30.0, 30.0, 50.0, 50.0] },
    ]];
    let dets = vec![vec![
        Detection { class_id: 0, score: 0.9, bbox: [0.0, 0.0, 20.0, 20.0] },
        Detection { class_id: 0, score: 0.8, bbox: [0.0, 40.0, 10.0, 50.0] },
        Detection { class_id: 0, score: 0.7, bbox: [30.0, 30.0, 50.0, 50.0] },
    ]];
    let rep = average_precision(&dets, &gt, &[0.5], 0.0, 1, SIZE);
    // recall 0..0.5 at precision 1 (51 points), 0.51..1 at precision 2/3 (50 points)
    let expect = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    assert!((rep.ap50 - expect).abs() < 1e-12, "{} vs {expect}", rep.ap50);
}
