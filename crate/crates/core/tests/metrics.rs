use geopretrain_core::dataset::{BBox, DetectionRecord};
use geopretrain_core::metrics::oracle::{brute_detection_eval, brute_seg_scores};
use geopretrain_core::metrics::{evaluate_detections, ConfusionMatrix, EvalParams, SegScores};
use proptest::prelude::*;

fn same(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || a == b
}

fn same_all(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| same(*x, *y))
}

fn assert_scores_eq(a: &SegScores, b: &SegScores) {
    assert!(same(a.pa, b.pa), "pa {} vs {}", a.pa, b.pa);
    assert!(same(a.pa_macro, b.pa_macro), "pa_macro {} vs {}", a.pa_macro, b.pa_macro);
    assert!(same(a.f1, b.f1), "f1 {} vs {}", a.f1, b.f1);
    assert!(same(a.miou, b.miou), "miou {} vs {}", a.miou, b.miou);
    assert!(same_all(&a.per_class_f1, &b.per_class_f1));
    assert!(same_all(&a.per_class_iou, &b.per_class_iou));
    assert!(same_all(&a.per_class_accuracy, &b.per_class_accuracy));
    assert_eq!(a.absent, b.absent);
}

fn labels(k: usize, n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0..k as u8, n)
}

fn shards() -> impl Strategy<Value = (usize, Vec<(Vec<u8>, Vec<u8>)>)> {
    (2usize..9).prop_flat_map(|k| {
        let shard = (1usize..200).prop_flat_map(move |n| (labels(k, n), labels(k, n)));
        (Just(k), prop::collection::vec(shard, 1..5))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sharded_confusion_matches_brute_force((k, parts) in shards()) {
        let mut total = ConfusionMatrix::new(k);
        for (pred, gt) in &parts {
            let mut cm = ConfusionMatrix::new(k);
            cm.update_slices(pred, gt).unwrap();
            total.merge(&cm).unwrap();
        }
        let pred: Vec<u8> = parts.iter().flat_map(|(p, _)| p.iter().copied()).collect();
        let gt: Vec<u8> = parts.iter().flat_map(|(_, g)| g.iter().copied()).collect();
        assert_scores_eq(&SegScores::from_confusion(&total).unwrap(), &brute_seg_scores(&pred, &gt, k).unwrap());
    }

    #[test]
    fn ignored_class_equals_squeezed_labels((k, parts) in shards(), drop in 0usize..8) {
        let drop = drop % k;
        let mut cm = ConfusionMatrix::new(k);
        for (pred, gt) in &parts {
            cm.update_slices(pred, gt).unwrap();
        }
        let reduced = cm.without_classes(&[drop]);

        // Independent route: remove every pixel that involves the ignored
        // class on either side and renumber the rest.
        let renum = |c: u8| if (c as usize) > drop { c - 1 } else { c };
        let (mut p, mut g) = (Vec::new(), Vec::new());
        for (pred, gt) in &parts {
            for (&a, &b) in pred.iter().zip(gt) {
                if a as usize != drop && b as usize != drop {
                    p.push(renum(a));
                    g.push(renum(b));
                }
            }
        }
        prop_assume!(!g.is_empty());
        let brute = brute_seg_scores(&p, &g, k - 1).unwrap();
        let ours = SegScores::from_confusion(&reduced).unwrap();
        prop_assert!(ours.absent.contains(&drop));
        let squeeze = |v: &[f64]| -> Vec<f64> {
            v.iter().enumerate().filter(|(c, _)| *c != drop).map(|(_, x)| *x).collect()
        };
        let squeezed = SegScores {
            per_class_f1: squeeze(&ours.per_class_f1),
            per_class_iou: squeeze(&ours.per_class_iou),
            per_class_accuracy: squeeze(&ours.per_class_accuracy),
            absent: ours.absent.iter().filter(|&&c| c != drop).map(|&c| if c > drop { c - 1 } else { c }).collect(),
            ..ours
        };
        assert_scores_eq(&squeezed, &brute);
    }
}

fn boxes(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<(BBox, usize)>> {
    let b = (0.0f64..90.0, 0.0f64..90.0, 2.0f64..60.0, 2.0f64..60.0, 0usize..3)
        .prop_map(|(x, y, w, h, c)| (BBox::new(x, y, x + w, y + h), c));
    prop::collection::vec(b, n)
}

fn images() -> impl Strategy<Value = Vec<(Vec<(BBox, usize)>, Vec<(BBox, usize)>)>> {
    prop::collection::vec((boxes(0..5), boxes(0..6)), 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn greedy_ap_matches_exhaustive(imgs in images(), max_dets in 1usize..8) {
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        let mut rank = 0usize;
        for (i, (g, p)) in imgs.iter().enumerate() {
            let id = format!("img{i}");
            gts.push(DetectionRecord::ground_truth(&id, g.iter().map(|b| b.0).collect(), g.iter().map(|b| b.1).collect()));
            // Distinct scores, so ranking is unambiguous.
            let scores = p.iter().map(|_| { rank += 1; 1.0 - rank as f64 * 1e-3 }).collect();
            preds.push(DetectionRecord::prediction(&id, p.iter().map(|b| b.0).collect(), p.iter().map(|b| b.1).collect(), scores));
        }
        let params = EvalParams { max_dets, ..EvalParams::default() };
        let fast = evaluate_detections(&gts, &preds, 3, &params).unwrap();
        let (summary, table) = brute_detection_eval(&gts, &preds, 3, &params).unwrap();
        assert!(same_all(&fast.summary().as_array(), &summary.as_array()), "{:?} vs {:?}", fast.summary(), summary);
        for (t, per_area) in table.iter().enumerate() {
            for (a, per_class) in per_area.iter().enumerate() {
                assert!(same_all(&fast.ap[t][a], per_class), "t {t} area {a}: {:?} vs {per_class:?}", fast.ap[t][a]);
            }
        }
    }
}
