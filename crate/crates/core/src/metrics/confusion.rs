//! Pixel confusion matrices and the scores derived from them.

use serde::Serialize;

use crate::dataset::ClassMap;
use crate::{Error, Result};

/// K x K exact counts; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// The class occurs in neither ground truth nor predictions.
    pub absent: bool,
}

/// Per-class values plus their macro mean. `included[k]` says whether class
/// `k` took part in the mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerClass {
    pub values: Vec<f64>,
    pub included: Vec<bool>,
    pub mean: f64,
}

impl PerClass {
    fn from_parts(values: Vec<f64>, included: Vec<bool>) -> Self {
        let n = included.iter().filter(|&&i| i).count();
        let sum: f64 = values.iter().zip(&included).filter(|(_, &i)| i).map(|(v, _)| v).sum();
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        Self { values, included, mean }
    }
}

pub(crate) fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub(crate) fn f1_from(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::ShapeMismatch(format!(
                "{} counts for a {k}x{k} matrix",
                counts.len()
            )));
        }
        Ok(Self { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn update(&mut self, pred: &ClassMap, gt: &ClassMap) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        self.update_slices(pred.as_slice(), gt.as_slice())
    }

    pub fn update_slices(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predicted pixels vs {} ground-truth pixels",
                pred.len(),
                gt.len()
            )));
        }
        if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c as usize >= self.k) {
            return Err(Error::InvalidArgument(format!(
                "class index {bad} outside {} classes",
                self.k
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(Error::ShapeMismatch(format!(
                "cannot merge {}-class and {}-class matrices",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k * self.k..(k + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.k).map(|g| self.get(g, k)).sum()
    }

    pub fn precision_recall(&self, k: usize) -> PrecisionRecall {
        let tp = self.get(k, k);
        let pred = self.col_sum(k);
        let actual = self.row_sum(k);
        PrecisionRecall {
            precision: ratio(tp, pred),
            recall: ratio(tp, actual),
            absent: pred == 0 && actual == 0,
        }
    }

    /// Per-class F1; the macro mean runs over classes present in ground truth.
    pub fn f1(&self) -> PerClass {
        let values = (0..self.k)
            .map(|k| {
                let pr = self.precision_recall(k);
                f1_from(pr.precision, pr.recall)
            })
            .collect();
        let included = (0..self.k).map(|k| self.row_sum(k) > 0).collect();
        PerClass::from_parts(values, included)
    }

    /// Per-class IoU; the mean runs over classes present in ground truth or
    /// predictions.
    pub fn iou(&self) -> PerClass {
        let values = (0..self.k)
            .map(|k| {
                let tp = self.get(k, k);
                let union = self.row_sum(k) + self.col_sum(k) - tp;
                ratio(tp, union)
            })
            .collect();
        let included = (0..self.k)
            .map(|k| self.row_sum(k) + self.col_sum(k) > 0)
            .collect();
        PerClass::from_parts(values, included)
    }

    /// Per-class pixel accuracy (recall); the mean runs over non-empty rows.
    pub fn class_accuracy(&self) -> PerClass {
        let values = (0..self.k).map(|k| ratio(self.get(k, k), self.row_sum(k))).collect();
        let included = (0..self.k).map(|k| self.row_sum(k) > 0).collect();
        PerClass::from_parts(values, included)
    }

    /// `(overall, macro)` pixel accuracy.
    pub fn pixel_accuracy(&self) -> Result<(f64, f64)> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidArgument("pixel accuracy of an empty matrix".into()));
        }
        Ok((ratio(self.trace(), total), self.class_accuracy().mean))
    }

    /// Copy with the given classes' rows and columns zeroed, so they drop out
    /// of every mean.
    pub fn without_classes(&self, exclude: &[usize]) -> Self {
        let mut out = self.clone();
        for &c in exclude.iter().filter(|&&c| c < self.k) {
            for j in 0..self.k {
                out.counts[c * self.k + j] = 0;
                out.counts[j * self.k + c] = 0;
            }
        }
        out
    }
}

/// The segmentation score row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegScores {
    pub pa: f64,
    pub pa_macro: f64,
    pub f1: f64,
    pub miou: f64,
    pub per_class_f1: Vec<f64>,
    pub per_class_iou: Vec<f64>,
    pub per_class_accuracy: Vec<f64>,
    /// Classes absent from both ground truth and predictions.
    pub absent: Vec<usize>,
}

impl SegScores {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let (pa, pa_macro) = cm.pixel_accuracy()?;
        let f1 = cm.f1();
        let iou = cm.iou();
        Ok(Self {
            pa,
            pa_macro,
            f1: f1.mean,
            miou: iou.mean,
            per_class_f1: f1.values,
            per_class_iou: iou.values,
            per_class_accuracy: cm.class_accuracy().values,
            absent: (0..cm.num_classes())
                .filter(|&k| cm.precision_recall(k).absent)
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm2(c: [[u64; 2]; 2]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(2, c.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn diagonal_update() {
        let mut cm = ConfusionMatrix::new(7);
        cm.update(&ClassMap::filled(2, 2, 2), &ClassMap::filled(2, 2, 2)).unwrap();
        assert_eq!(cm.get(2, 2), 4);
        assert_eq!(cm.total(), 4);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&ClassMap::filled(3, 1, 1), &ClassMap::filled(3, 1, 0)).unwrap();
        assert_eq!(cm.get(0, 1), 3);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut cm = ConfusionMatrix::new(3);
        assert!(cm.update(&ClassMap::filled(2, 2, 0), &ClassMap::filled(2, 3, 0)).is_err());
        assert!(cm.update_slices(&[5], &[0]).is_err());
    }

    #[test]
    fn absent_class_policy() {
        let cm = ConfusionMatrix::from_counts(3, vec![2, 0, 0, 0, 3, 0, 0, 0, 0]).unwrap();
        let pr = cm.precision_recall(2);
        assert_eq!((pr.precision, pr.recall, pr.absent), (0.0, 0.0, true));
        assert_eq!(cm.iou().mean, 1.0);
        assert_eq!(cm.f1().mean, 1.0);
        assert_eq!(cm.pixel_accuracy().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn pixel_accuracy_fixture() {
        let (overall, macro_pa) = cm2([[3, 1], [0, 4]]).pixel_accuracy().unwrap();
        assert_eq!(overall, 7.0 / 8.0);
        assert_eq!(macro_pa, 7.0 / 8.0);
        assert!(ConfusionMatrix::new(2).pixel_accuracy().is_err());
    }

    #[test]
    fn disjoint_two_class_miou_is_zero() {
        let cm = cm2([[0, 5], [3, 0]]);
        assert_eq!(cm.iou().mean, 0.0);
        assert_eq!(cm.f1().mean, 0.0);
    }

    #[test]
    fn exclusion_drops_class() {
        let cm = cm2([[5, 1], [2, 4]]).without_classes(&[1]);
        assert_eq!(cm.iou().mean, 1.0);
        assert_eq!(cm.total(), 5);
    }
}
