//! Tri-map evaluation and run aggregation.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{Trimap, NUM_TRIMAP_CLASSES, UNKNOWN};

const K: usize = NUM_TRIMAP_CLASSES;

/// `counts[t][p]` = pixels with truth `t` predicted as `p`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub counts: [[u64; K]; K],
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..K).map(|c| self.counts[c][c]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for t in 0..K {
            for p in 0..K {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }
}

impl AddAssign<&ConfusionCounts> for ConfusionCounts {
    fn add_assign(&mut self, rhs: &ConfusionCounts) {
        self.merge(rhs);
    }
}

/// Adds the joint (truth, prediction) histogram of one image.
pub fn accumulate(pred: &Trimap, truth: &Trimap, counts: &mut ConfusionCounts) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    for (&p, &t) in pred.labels().iter().zip(truth.labels().iter()) {
        counts.counts[t as usize][p as usize] += 1;
    }
    Ok(())
}

/// Which pixels count towards accuracy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    #[default]
    AllPixels,
    /// Pixels whose truth is "unknown" are left out of the accuracy ratio.
    IgnoreUnknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent.
    pub accuracy: f64,
    /// Percent; mean over classes with a non-zero IoU denominator.
    pub miou: f64,
    /// Percent per class (foreground, background, unknown); `None` when the
    /// class neither occurs nor is predicted.
    pub per_class_iou: [Option<f64>; K],
    /// Percent per class, `TP / (TP + FP)`; `None` when never predicted.
    pub per_class_precision: [Option<f64>; K],
    pub n_pixels: u64,
}

impl MetricsReport {
    pub fn excluded_classes(&self) -> Vec<usize> {
        (0..K).filter(|&c| self.per_class_iou[c].is_none()).collect()
    }
}

pub fn miou(counts: &ConfusionCounts) -> Result<MetricsReport> {
    miou_with(counts, AccuracyMode::AllPixels)
}

/// `IoU_c = TP / (TP + FP + FN)`; classes with a zero denominator are
/// excluded from the mean.
pub fn miou_with(counts: &ConfusionCounts, mode: AccuracyMode) -> Result<MetricsReport> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::Metrics("no pixels evaluated".into()));
    }
    let c = &counts.counts;
    let mut per_class_iou = [None; K];
    let mut per_class_precision = [None; K];
    for k in 0..K {
        let tp = c[k][k];
        let fp: u64 = (0..K).filter(|&t| t != k).map(|t| c[t][k]).sum();
        let fn_: u64 = (0..K).filter(|&p| p != k).map(|p| c[k][p]).sum();
        let denom = tp + fp + fn_;
        if denom > 0 {
            per_class_iou[k] = Some(100.0 * tp as f64 / denom as f64);
        }
        if tp + fp > 0 {
            per_class_precision[k] = Some(100.0 * tp as f64 / (tp + fp) as f64);
        }
    }
    let included: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::Metrics("no evaluable class".into()));
    }
    let miou = included.iter().sum::<f64>() / included.len() as f64;
    let accuracy = match mode {
        AccuracyMode::AllPixels => 100.0 * counts.trace() as f64 / total as f64,
        AccuracyMode::IgnoreUnknown => {
            let u = UNKNOWN as usize;
            let kept: u64 = total - c[u].iter().sum::<u64>();
            if kept == 0 {
                return Err(Error::Metrics("every pixel is unknown".into()));
            }
            100.0 * (counts.trace() - c[u][u]) as f64 / kept as f64
        }
    };
    Ok(MetricsReport {
        accuracy,
        miou,
        per_class_iou,
        per_class_precision,
        n_pixels: total,
    })
}

/// Mean with sample standard deviation and standard error over runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Aggregate {
    /// Only one run: spread reported as zero.
    pub fn single_run(&self) -> bool {
        self.n == 1
    }

    /// `"70.33 ± 0.89"`.
    pub fn format(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.stderr)
    }
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Metrics("cannot aggregate an empty list".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let (std, stderr) = if n == 1 {
        (0.0, 0.0)
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var.sqrt(), var.sqrt() / (n as f64).sqrt())
    };
    Ok(Aggregate { mean, std, stderr, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tm(a: ndarray::Array2<u8>) -> Trimap {
        Trimap::new(a).unwrap()
    }

    #[test]
    fn worked_two_by_two() {
        let truth = tm(array![[0, 0], [1, 1]]);
        let pred = tm(array![[0, 1], [1, 1]]);
        let mut c = ConfusionCounts::default();
        accumulate(&pred, &truth, &mut c).unwrap();
        let r = miou(&c).unwrap();
        assert_eq!(r.accuracy, 75.0);
        assert_eq!(r.per_class_iou[0], Some(50.0));
        assert!((r.per_class_iou[1].unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class_iou[2], None);
        assert_eq!(r.excluded_classes(), vec![2]);
        assert!((r.miou - 58.333_333_333_333_336).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_disjoint() {
        let t = tm(array![[0, 1], [2, 2]]);
        let mut c = ConfusionCounts::default();
        accumulate(&t, &t, &mut c).unwrap();
        assert_eq!(c.trace(), 4);
        let r = miou(&c).unwrap();
        assert_eq!((r.accuracy, r.miou), (100.0, 100.0));

        let pred = tm(array![[1, 1], [2, 2]]);
        let mut c = ConfusionCounts::default();
        accumulate(&pred, &t, &mut c).unwrap();
        assert_eq!(miou(&c).unwrap().per_class_iou[0], Some(0.0));
    }

    #[test]
    fn errors() {
        assert!(miou(&ConfusionCounts::default()).is_err());
        let mut c = ConfusionCounts::default();
        assert!(accumulate(&tm(array![[0]]), &tm(array![[0, 0]]), &mut c).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn ignore_unknown_accuracy() {
        let truth = tm(array![[0, 2], [1, 2]]);
        let pred = tm(array![[0, 0], [0, 2]]);
        let mut c = ConfusionCounts::default();
        accumulate(&pred, &truth, &mut c).unwrap();
        assert_eq!(miou_with(&c, AccuracyMode::IgnoreUnknown).unwrap().accuracy, 50.0);
        assert_eq!(miou(&c).unwrap().accuracy, 50.0);
    }

    #[test]
    fn aggregate_closed_forms() {
        let a = aggregate(&[70.0, 70.5, 71.0]).unwrap();
        assert!((a.mean - 70.5).abs() < 1e-12);
        assert!((a.std - 0.5).abs() < 1e-12);
        assert_eq!(a.format(), "70.50 ± 0.29");
        let s = aggregate(&[3.25, 3.25, 3.25]).unwrap();
        assert_eq!(s.format(), "3.25 ± 0.00");
        let one = aggregate(&[43.73]).unwrap();
        assert!(one.single_run());
        assert_eq!(one.format(), "43.73 ± 0.00");
    }
}
