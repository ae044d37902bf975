//! Evaluation math: confusion matrices, classification accuracy, box IoU and
//! COCO-style average precision, with brute-force oracles in [`oracle`].
//!
//! Accumulators hold exact integer counts and merge by addition, so shards
//! can be evaluated independently and reduced.

pub mod accuracy;
pub mod ap;
pub mod boxes;
pub mod confusion;
pub mod oracle;

pub use accuracy::{accuracy, AccuracyCounter, AccuracyReport};
pub use ap::{
    average_precision, coco_iou_thresholds, evaluate_detections, ApResult, ApSummary, AreaRange,
    DetectionEval, EvalParams, PrPoint, AREA_ALL, AREA_LARGE, AREA_MEDIUM, AREA_SMALL,
};
pub use boxes::box_iou;
pub use confusion::{ConfusionMatrix, PerClass, PrecisionRecall, SegScores};
