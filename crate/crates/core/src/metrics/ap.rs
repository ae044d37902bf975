//! COCO-convention average precision for axis-aligned boxes.
//!
//! Per image and class, detections are ranked by score (ties: higher best
//! IoU with any ground truth first, then input order) and truncated to
//! `max_dets`. Each detection in turn takes the unmatched ground truth with
//! the highest IoU at or above the threshold; ground truths outside the area
//! range are ignored and only used when no regular match exists. Among
//! equal IoUs the earlier ground truth wins. Unmatched detections outside the
//! area range are ignored. Precision is made monotone and sampled at 101
//! recall points.

use std::collections::BTreeMap;

use serde::Serialize;

use super::boxes::box_iou;
use crate::dataset::{BBox, DetectionRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AreaRange {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && area <= self.hi
    }
}

pub const AREA_ALL: AreaRange = AreaRange { name: "all", lo: 0.0, hi: 1e10 };
pub const AREA_SMALL: AreaRange = AreaRange { name: "small", lo: 0.0, hi: 1024.0 };
pub const AREA_MEDIUM: AreaRange = AreaRange { name: "medium", lo: 1024.0, hi: 9216.0 };
pub const AREA_LARGE: AreaRange = AreaRange { name: "large", lo: 9216.0, hi: 1e10 };

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    let step = (0.95 - 0.5) / 9.0;
    (0..10).map(|i| 0.5 + i as f64 * step).collect()
}

/// Recall sample points 0.00:0.01:1.00.
pub fn recall_points() -> Vec<f64> {
    (0..=100).map(|i| i as f64 * 0.01).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    pub area_ranges: Vec<AreaRange>,
    pub max_dets: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_thresholds: coco_iou_thresholds(),
            area_ranges: vec![AREA_ALL, AREA_SMALL, AREA_MEDIUM, AREA_LARGE],
            max_dets: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Results indexed `[threshold][area][class]`. AP is -1 for a class with no
/// non-ignored ground truth in that area range.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionEval {
    pub params: EvalParams,
    pub num_classes: usize,
    pub ap: Vec<Vec<Vec<f64>>>,
    pub recall: Vec<Vec<Vec<f64>>>,
    /// Raw sweep points, `[threshold][area][class]`.
    pub curves: Vec<Vec<Vec<Vec<PrPoint>>>>,
}

/// The six-number table row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
}

impl ApSummary {
    pub fn as_array(&self) -> [f64; 6] {
        [self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m, self.ap_l]
    }
}

/// Mean of the entries that are not -1, or -1 when there are none.
pub(crate) fn valid_mean<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .filter(|&&v| v > -1.0)
        .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
    if n == 0 {
        -1.0
    } else {
        sum / n as f64
    }
}

impl DetectionEval {
    fn threshold_index(&self, t: f64) -> Option<usize> {
        self.params
            .iou_thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
    }

    fn area_index(&self, name: &str) -> Option<usize> {
        self.params.area_ranges.iter().position(|a| a.name == name)
    }

    /// Mean AP over all thresholds and classes for one area range.
    pub fn mean_ap(&self, area: &str) -> f64 {
        let Some(a) = self.area_index(area) else { return -1.0 };
        valid_mean(self.ap.iter().flat_map(|per_area| per_area[a].iter()))
    }

    /// Mean AP over classes at one threshold, all areas.
    pub fn ap_at(&self, threshold: f64) -> f64 {
        match (self.threshold_index(threshold), self.area_index("all")) {
            (Some(t), Some(a)) => valid_mean(&self.ap[t][a]),
            _ => -1.0,
        }
    }

    pub fn summary(&self) -> ApSummary {
        ApSummary {
            ap: self.mean_ap("all"),
            ap50: self.ap_at(0.5),
            ap75: self.ap_at(0.75),
            ap_s: self.mean_ap("small"),
            ap_m: self.mean_ap("medium"),
            ap_l: self.mean_ap("large"),
        }
    }

    /// Per-class AP averaged over thresholds (all areas); -1 for classes
    /// without ground truth.
    pub fn per_class_ap(&self) -> Vec<f64> {
        let Some(a) = self.area_index("all") else {
            return vec![-1.0; self.num_classes];
        };
        (0..self.num_classes)
            .map(|k| valid_mean(self.ap.iter().map(|per_area| &per_area[a][k])))
            .collect()
    }
}

/// One detection after per-image ranking, ready for the cross-image sweep.
struct Scored {
    score: f64,
    best_iou: f64,
    image: usize,
    rank: usize,
    matched: bool,
    ignored: bool,
}

pub(crate) fn check_inputs(
    gts: &[DetectionRecord],
    preds: &[DetectionRecord],
    num_classes: usize,
) -> Result<BTreeMap<String, usize>> {
    let mut images = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        g.validate(num_classes)?;
        if images.insert(g.image_id.clone(), i).is_some() {
            return Err(Error::InvalidAnnotations(format!(
                "duplicate ground-truth record for image `{}`",
                g.image_id
            )));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for p in preds {
        p.validate(num_classes)?;
        let Some(scores) = &p.scores else {
            return Err(Error::InvalidAnnotations(format!(
                "predictions for image `{}` carry no scores",
                p.image_id
            )));
        };
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidAnnotations(format!(
                "non-finite score for image `{}`",
                p.image_id
            )));
        }
        if !images.contains_key(&p.image_id) {
            return Err(Error::InvalidAnnotations(format!(
                "prediction for unknown image `{}`",
                p.image_id
            )));
        }
        if !seen.insert(p.image_id.clone()) {
            return Err(Error::InvalidAnnotations(format!(
                "duplicate prediction record for image `{}`",
                p.image_id
            )));
        }
    }
    Ok(images)
}

/// Boxes of one class in one record, as `(box, score)` in input order.
pub(crate) fn class_boxes(r: &DetectionRecord, class: usize) -> Vec<(BBox, f64)> {
    r.boxes
        .iter()
        .zip(&r.labels)
        .enumerate()
        .filter(|(_, (_, &l))| l == class)
        .map(|(i, (b, _))| (*b, r.scores.as_ref().map_or(1.0, |s| s[i])))
        .collect()
}

/// Ranks detections: score descending, then best IoU with any ground truth
/// descending, then input order. Returns indices and best IoUs.
fn rank_detections(dets: &[(BBox, f64)], gts: &[BBox]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = dets
        .iter()
        .enumerate()
        .map(|(i, (d, _))| (i, gts.iter().map(|g| box_iou(d, g)).fold(0.0, f64::max)))
        .collect();
    ranked.sort_by(|a, b| {
        dets[b.0]
            .1
            .total_cmp(&dets[a.0].1)
            .then(b.1.total_cmp(&a.1))
            .then(a.0.cmp(&b.0))
    });
    ranked
}

/// Greedy matching for one image and class. `dets` are already ranked.
/// Returns `(matched, ignored)` per detection.
fn greedy_match(dets: &[BBox], gts: &[BBox], gt_ignored: &[bool], threshold: f64, area: &AreaRange) -> Vec<(bool, bool)> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = box_iou(d, gt);
                if iou < threshold {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((b, biou)) => match (gt_ignored[b], gt_ignored[g]) {
                        (true, false) => true,
                        (false, true) => false,
                        _ => iou > biou,
                    },
                };
                if better {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    (true, gt_ignored[g])
                }
                None => (false, !area.contains(d.area())),
            }
        })
        .collect()
}

/// Samples the monotone precision envelope at the 101 recall points.
fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (1..envelope.len()).rev() {
        if envelope[i] > envelope[i - 1] {
            envelope[i - 1] = envelope[i];
        }
    }
    let points = recall_points();
    let sum: f64 = points
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&x| x < r);
            envelope.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    sum / points.len() as f64
}

/// Evaluates predictions against ground truth over every threshold and
/// area range in `params`. Each ground-truth record is one image; images
/// without predictions count as having none.
pub fn evaluate_detections(
    gts: &[DetectionRecord],
    preds: &[DetectionRecord],
    num_classes: usize,
    params: &EvalParams,
) -> Result<DetectionEval> {
    let images = check_inputs(gts, preds, num_classes)?;
    let mut preds_by_image: Vec<Option<&DetectionRecord>> = vec![None; gts.len()];
    for p in preds {
        preds_by_image[images[&p.image_id]] = Some(p);
    }

    let nt = params.iou_thresholds.len();
    let na = params.area_ranges.len();
    let mut ap = vec![vec![vec![-1.0; num_classes]; na]; nt];
    let mut recall = ap.clone();
    let mut curves = vec![vec![vec![Vec::new(); num_classes]; na]; nt];

    for class in 0..num_classes {
        // Per image: ground-truth boxes and ranked, truncated detections.
        let per_image: Vec<(Vec<BBox>, Vec<(BBox, f64, f64)>)> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let gt_boxes: Vec<BBox> = class_boxes(g, class).into_iter().map(|(b, _)| b).collect();
                let dets = preds_by_image[i].map(|p| class_boxes(p, class)).unwrap_or_default();
                let ranked = rank_detections(&dets, &gt_boxes)
                    .into_iter()
                    .take(params.max_dets)
                    .map(|(d, best)| (dets[d].0, dets[d].1, best))
                    .collect();
                (gt_boxes, ranked)
            })
            .collect();

        for (a, area) in params.area_ranges.iter().enumerate() {
            let mut npos = 0usize;
            let ignored: Vec<Vec<bool>> = per_image
                .iter()
                .map(|(g, _)| g.iter().map(|b| !area.contains(b.area())).collect())
                .collect();
            for ig in &ignored {
                npos += ig.iter().filter(|&&i| !i).count();
            }
            if npos == 0 {
                continue;
            }
            for (t, &threshold) in params.iou_thresholds.iter().enumerate() {
                let mut scored = Vec::new();
                for (image, ((gt_boxes, dets), gt_ig)) in per_image.iter().zip(&ignored).enumerate() {
                    let boxes: Vec<BBox> = dets.iter().map(|d| d.0).collect();
                    let flags = greedy_match(&boxes, gt_boxes, gt_ig, threshold, area);
                    for (rank, ((_, score, best_iou), (matched, ig))) in dets.iter().zip(flags).enumerate() {
                        scored.push(Scored {
                            score: *score,
                            best_iou: *best_iou,
                            image,
                            rank,
                            matched,
                            ignored: ig,
                        });
                    }
                }
                scored.sort_by(|x, y| {
                    y.score
                        .total_cmp(&x.score)
                        .then(y.best_iou.total_cmp(&x.best_iou))
                        .then(x.image.cmp(&y.image))
                        .then(x.rank.cmp(&y.rank))
                });
                let (mut tp, mut fp) = (0usize, 0usize);
                let mut rc = Vec::new();
                let mut pr = Vec::new();
                for s in scored.iter().filter(|s| !s.ignored) {
                    if s.matched {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                    rc.push(tp as f64 / npos as f64);
                    pr.push(tp as f64 / (tp + fp) as f64);
                }
                recall[t][a][class] = rc.last().copied().unwrap_or(0.0);
                ap[t][a][class] = interpolated_ap(&rc, &pr);
                curves[t][a][class] = rc
                    .iter()
                    .zip(&pr)
                    .map(|(&recall, &precision)| PrPoint { recall, precision })
                    .collect();
            }
        }
    }
    Ok(DetectionEval {
        params: params.clone(),
        num_classes,
        ap,
        recall,
        curves,
    })
}

/// Single-threshold AP, optionally restricted to one area range.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApResult {
    pub threshold: f64,
    pub per_class: Vec<f64>,
    pub mean: f64,
    pub curves: Vec<Vec<PrPoint>>,
}

pub fn average_precision(
    preds: &[DetectionRecord],
    gts: &[DetectionRecord],
    num_classes: usize,
    iou_threshold: f64,
    area: Option<AreaRange>,
) -> Result<ApResult> {
    let params = EvalParams {
        iou_thresholds: vec![iou_threshold],
        area_ranges: vec![area.unwrap_or(AREA_ALL)],
        max_dets: 100,
    };
    let mut eval = evaluate_detections(gts, preds, num_classes, &params)?;
    let per_class = eval.ap[0].remove(0);
    Ok(ApResult {
        threshold: iou_threshold,
        mean: valid_mean(&per_class),
        per_class,
        curves: eval.curves[0].remove(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(id: &str, boxes: &[[f64; 4]], labels: &[usize]) -> DetectionRecord {
        DetectionRecord::ground_truth(
            id,
            boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect(),
            labels.to_vec(),
        )
    }

    fn echo(r: &DetectionRecord) -> DetectionRecord {
        DetectionRecord::prediction(r.image_id.clone(), r.boxes.clone(), r.labels.clone(), vec![1.0; r.len()])
    }

    fn fixture() -> Vec<DetectionRecord> {
        vec![
            gt("a", &[[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 200.0, 200.0]], &[0, 1]),
            gt("b", &[[5.0, 5.0, 60.0, 60.0]], &[0]),
        ]
    }

    #[test]
    fn thresholds() {
        let t = coco_iou_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert!((t[5] - 0.75).abs() < 1e-12);
        assert!((t[9] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let gts = fixture();
        let preds: Vec<_> = gts.iter().map(echo).collect();
        let s = evaluate_detections(&gts, &preds, 2, &EvalParams::default()).unwrap().summary();
        assert_eq!((s.ap, s.ap50, s.ap75), (1.0, 1.0, 1.0));
        assert_eq!(s.ap_s, 1.0);
        assert_eq!(s.ap_m, 1.0);
        assert_eq!(s.ap_l, 1.0);
    }

    #[test]
    fn no_predictions() {
        let gts = fixture();
        let s = evaluate_detections(&gts, &[], 2, &EvalParams::default()).unwrap().summary();
        assert_eq!(s.as_array(), [0.0; 6]);
    }

    #[test]
    fn empty_size_bucket_is_minus_one() {
        let gts = vec![gt("a", &[[0.0, 0.0, 10.0, 10.0]], &[0])];
        let preds: Vec<_> = gts.iter().map(echo).collect();
        let s = evaluate_detections(&gts, &preds, 1, &EvalParams::default()).unwrap().summary();
        assert_eq!((s.ap_s, s.ap_m, s.ap_l), (1.0, -1.0, -1.0));
    }

    #[test]
    fn one_false_positive_above_the_hit() {
        let gts = vec![gt("a", &[[0.0, 0.0, 10.0, 10.0]], &[0])];
        let preds = vec![DetectionRecord::prediction(
            "a",
            vec![BBox::new(50.0, 50.0, 60.0, 60.0), BBox::new(0.0, 0.0, 10.0, 10.0)],
            vec![0, 0],
            vec![0.9, 0.8],
        )];
        let r = average_precision(&preds, &gts, 1, 0.5, None).unwrap();
        // Precision 1/2 at every recall point.
        assert!((r.mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unknown_label_is_fatal() {
        let gts = vec![gt("a", &[[0.0, 0.0, 10.0, 10.0]], &[3])];
        assert!(evaluate_detections(&gts, &[], 2, &EvalParams::default()).is_err());
        let gts = fixture();
        let bad = vec![DetectionRecord::prediction("zzz", vec![], vec![], vec![])];
        assert!(evaluate_detections(&gts, &bad, 2, &EvalParams::default()).is_err());
    }

    #[test]
    fn ap_is_monotone_in_threshold() {
        let gts = fixture();
        let preds = vec![DetectionRecord::prediction(
            "a",
            vec![BBox::new(1.0, 1.0, 11.0, 11.0), BBox::new(25.0, 20.0, 200.0, 210.0)],
            vec![0, 1],
            vec![0.7, 0.6],
        )];
        let e = evaluate_detections(&gts, &preds, 2, &EvalParams::default()).unwrap();
        let per_t: Vec<f64> = (0..10).map(|t| valid_mean(&e.ap[t][0])).collect();
        assert!(per_t.windows(2).all(|w| w[0] >= w[1]), "{per_t:?}");
    }
}
