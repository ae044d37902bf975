//! Brute-force reference implementations for small inputs.
//!
//! These recompute the same quantities by direct enumeration: per-pixel
//! tallies instead of a confusion matrix, and an exhaustive search over all
//! detection-to-ground-truth assignments instead of greedy matching.

use super::ap::{check_inputs, class_boxes, recall_points, valid_mean, ApSummary, EvalParams};
use super::boxes::box_iou;
use super::confusion::{f1_from, SegScores};
use crate::dataset::{BBox, DetectionRecord};
use crate::{Error, Result};

/// Segmentation scores from direct per-pixel counting.
pub fn brute_seg_scores(pred: &[u8], gt: &[u8], k: usize) -> Result<SegScores> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch("oracle needs equal, non-empty maps".into()));
    }
    let mut correct = 0u64;
    for i in 0..pred.len() {
        if pred[i] == gt[i] {
            correct += 1;
        }
    }
    let pa = correct as f64 / pred.len() as f64;
    let mut f1s = Vec::new();
    let mut ious = Vec::new();
    let mut accs = Vec::new();
    let mut absent = Vec::new();
    let (mut f1_sum, mut f1_n) = (0.0, 0usize);
    let (mut iou_sum, mut iou_n) = (0.0, 0usize);
    let (mut acc_sum, mut acc_n) = (0.0, 0usize);
    for c in 0..k as u8 {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for i in 0..pred.len() {
            match (pred[i] == c, gt[i] == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let div = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = div(tp, tp + fp);
        let recall = div(tp, tp + fn_);
        let f1 = f1_from(precision, recall);
        let iou = div(tp, tp + fp + fn_);
        f1s.push(f1);
        ious.push(iou);
        accs.push(recall);
        if tp + fn_ > 0 {
            f1_sum += f1;
            f1_n += 1;
            acc_sum += recall;
            acc_n += 1;
        }
        if tp + fp + fn_ > 0 {
            iou_sum += iou;
            iou_n += 1;
        } else {
            absent.push(c as usize);
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(SegScores {
        pa,
        pa_macro: mean(acc_sum, acc_n),
        f1: mean(f1_sum, f1_n),
        miou: mean(iou_sum, iou_n),
        per_class_f1: f1s,
        per_class_iou: ious,
        per_class_accuracy: accs,
        absent,
    })
}

/// Per-detection preference key; larger is better.
type Key = (u8, u8, f64, i64);

fn key_cmp(a: &Key, b: &Key) -> std::cmp::Ordering {
    a.0.cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.total_cmp(&b.2))
        .then(a.3.cmp(&b.3))
}

/// Searches every partial one-to-one assignment of detections (in rank
/// order) to ground truths with IoU at or above `threshold` and returns the
/// assignment whose key sequence is lexicographically largest.
fn exhaustive_match(dets: &[BBox], gts: &[BBox], gt_ignored: &[bool], threshold: f64) -> Vec<Option<usize>> {
    fn key_of(dets: &[BBox], gts: &[BBox], ign: &[bool], d: usize, a: Option<usize>) -> Key {
        match a {
            Some(g) => (1, u8::from(!ign[g]), box_iou(&dets[d], &gts[g]), -(g as i64)),
            None => (0, 0, 0.0, 0),
        }
    }
    #[allow(clippy::too_many_arguments)]
    fn search(
        d: usize,
        dets: &[BBox],
        gts: &[BBox],
        ign: &[bool],
        threshold: f64,
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<Key>, Vec<Option<usize>>)>,
    ) {
        if d == dets.len() {
            let keys: Vec<Key> = current
                .iter()
                .enumerate()
                .map(|(i, &a)| key_of(dets, gts, ign, i, a))
                .collect();
            let better = match best {
                None => true,
                Some((bk, _)) => {
                    keys.iter()
                        .zip(bk.iter())
                        .map(|(a, b)| key_cmp(a, b))
                        .find(|o| o.is_ne())
                        == Some(std::cmp::Ordering::Greater)
                }
            };
            if better {
                *best = Some((keys, current.clone()));
            }
            return;
        }
        current.push(None);
        search(d + 1, dets, gts, ign, threshold, used, current, best);
        current.pop();
        for g in 0..gts.len() {
            if !used[g] && box_iou(&dets[d], &gts[g]) >= threshold {
                used[g] = true;
                current.push(Some(g));
                search(d + 1, dets, gts, ign, threshold, used, current, best);
                current.pop();
                used[g] = false;
            }
        }
    }
    let mut best = None;
    search(0, dets, gts, gt_ignored, threshold, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
    best.map(|(_, a)| a).unwrap_or_default()
}

/// Interpolated precision at recall r: the best precision at any cutoff
/// reaching recall r, or 0 when none does.
fn brute_ap(points: &[(f64, f64)]) -> f64 {
    let recalls = recall_points();
    let total: f64 = recalls
        .iter()
        .map(|&r| {
            points
                .iter()
                .filter(|(rc, _)| *rc >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    total / recalls.len() as f64
}

/// AP table computed by exhaustive matching. Intended for a handful of
/// boxes per image and class.
pub fn brute_detection_eval(
    gts: &[DetectionRecord],
    preds: &[DetectionRecord],
    num_classes: usize,
    params: &EvalParams,
) -> Result<(ApSummary, Vec<Vec<Vec<f64>>>)> {
    let images = check_inputs(gts, preds, num_classes)?;
    let nt = params.iou_thresholds.len();
    let na = params.area_ranges.len();
    let mut ap = vec![vec![vec![-1.0; num_classes]; na]; nt];

    for (t, &threshold) in params.iou_thresholds.iter().enumerate() {
        for (a, area) in params.area_ranges.iter().enumerate() {
            for class in 0..num_classes {
                // (score, best iou, image, rank, matched, ignored)
                let mut rows: Vec<(f64, f64, usize, usize, bool, bool)> = Vec::new();
                let mut npos = 0usize;
                for (image, g) in gts.iter().enumerate() {
                    let gt_boxes: Vec<BBox> = class_boxes(g, class).into_iter().map(|(b, _)| b).collect();
                    let ign: Vec<bool> = gt_boxes.iter().map(|b| !area.contains(b.area())).collect();
                    npos += ign.iter().filter(|&&i| !i).count();
                    let dets = preds
                        .iter()
                        .find(|p| images[&p.image_id] == image)
                        .map(|p| class_boxes(p, class))
                        .unwrap_or_default();
                    // Rank by (score desc, best IoU desc, input order).
                    let mut order: Vec<(f64, f64, usize)> = dets
                        .iter()
                        .enumerate()
                        .map(|(i, (b, s))| {
                            let best = gt_boxes.iter().map(|g| box_iou(b, g)).fold(0.0, f64::max);
                            (*s, best, i)
                        })
                        .collect();
                    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(y.1.total_cmp(&x.1)).then(x.2.cmp(&y.2)));
                    order.truncate(params.max_dets);
                    let ranked: Vec<BBox> = order.iter().map(|o| dets[o.2].0).collect();
                    let assignment = exhaustive_match(&ranked, &gt_boxes, &ign, threshold);
                    for (rank, (o, m)) in order.iter().zip(assignment).enumerate() {
                        let (matched, ignored) = match m {
                            Some(g) => (true, ign[g]),
                            None => (false, !area.contains(ranked[rank].area())),
                        };
                        rows.push((o.0, o.1, image, rank, matched, ignored));
                    }
                }
                if npos == 0 {
                    continue;
                }
                rows.sort_by(|x, y| {
                    y.0.total_cmp(&x.0)
                        .then(y.1.total_cmp(&x.1))
                        .then(x.2.cmp(&y.2))
                        .then(x.3.cmp(&y.3))
                });
                let mut points = Vec::new();
                let (mut tp, mut seen) = (0usize, 0usize);
                for r in rows.iter().filter(|r| !r.5) {
                    seen += 1;
                    if r.4 {
                        tp += 1;
                    }
                    points.push((tp as f64 / npos as f64, tp as f64 / seen as f64));
                }
                ap[t][a][class] = brute_ap(&points);
            }
        }
    }

    let t_idx = |v: f64| params.iou_thresholds.iter().position(|&x| (x - v).abs() < 1e-9);
    let a_idx = |n: &str| params.area_ranges.iter().position(|r| r.name == n);
    let over_area = |n: &str| match a_idx(n) {
        Some(a) => valid_mean(ap.iter().flat_map(|pa| pa[a].iter())),
        None => -1.0,
    };
    let at = |v: f64| match (t_idx(v), a_idx("all")) {
        (Some(t), Some(a)) => valid_mean(&ap[t][a]),
        _ => -1.0,
    };
    let summary = ApSummary {
        ap: over_area("all"),
        ap50: at(0.5),
        ap75: at(0.75),
        ap_s: over_area("small"),
        ap_m: over_area("medium"),
        ap_l: over_area("large"),
    };
    Ok((summary, ap))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_prefers_regular_over_ignored_ground_truth() {
        let d = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let g = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(0.0, 0.0, 10.0, 8.0)];
        assert_eq!(exhaustive_match(&d, &g, &[true, false], 0.5), vec![Some(1)]);
        assert_eq!(exhaustive_match(&d, &g, &[false, false], 0.5), vec![Some(0)]);
    }

    #[test]
    fn earlier_detection_takes_the_better_match() {
        let d = [BBox::new(0.0, 0.0, 10.0, 9.0), BBox::new(0.0, 0.0, 10.0, 10.0)];
        let g = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(exhaustive_match(&d, &g, &[false], 0.5), vec![Some(0), None]);
    }
}
