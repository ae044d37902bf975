//! Classification accuracy counters.

use serde::Serialize;

use crate::{Error, Result};

/// Per-class correct/total counts. Mergeable across shards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AccuracyCounter {
    correct: Vec<u64>,
    total: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub global: f64,
    /// Mean of per-class accuracy over classes with samples.
    pub macro_avg: f64,
    pub per_class: Vec<f64>,
}

impl AccuracyCounter {
    pub fn new(num_classes: usize) -> Self {
        Self {
            correct: vec![0; num_classes],
            total: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, predicted: usize, actual: usize) -> Result<()> {
        let k = self.total.len();
        if predicted >= k || actual >= k {
            return Err(Error::InvalidArgument(format!(
                "label outside {k} classes (predicted {predicted}, actual {actual})"
            )));
        }
        self.total[actual] += 1;
        if predicted == actual {
            self.correct[actual] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &AccuracyCounter) {
        for (a, b) in self.correct.iter_mut().zip(&other.correct) {
            *a += b;
        }
        for (a, b) in self.total.iter_mut().zip(&other.total) {
            *a += b;
        }
    }

    pub fn count(&self) -> u64 {
        self.total.iter().sum()
    }

    pub fn report(&self) -> Result<AccuracyReport> {
        let n = self.count();
        if n == 0 {
            return Err(Error::InvalidArgument("accuracy over an empty set".into()));
        }
        let correct: u64 = self.correct.iter().sum();
        let per_class: Vec<f64> = self
            .correct
            .iter()
            .zip(&self.total)
            .map(|(&c, &t)| super::confusion::ratio(c, t))
            .collect();
        let present: Vec<f64> = per_class
            .iter()
            .zip(&self.total)
            .filter(|(_, &t)| t > 0)
            .map(|(&a, _)| a)
            .collect();
        Ok(AccuracyReport {
            global: correct as f64 / n as f64,
            macro_avg: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }
}

/// Accuracy of `predicted` against `actual`.
pub fn accuracy(predicted: &[usize], actual: &[usize], num_classes: usize) -> Result<AccuracyReport> {
    if predicted.len() != actual.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    let mut c = AccuracyCounter::new(num_classes);
    for (&p, &a) in predicted.iter().zip(actual) {
        c.add(p, a)?;
    }
    c.report()
}
