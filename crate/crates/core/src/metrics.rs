//! Confusion matrix, per-grade precision/recall/F1 and magnification-stratified accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Grade, Magnification, NUM_GRADES};

/// Rows are true grades, columns predicted grades.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_GRADES]; NUM_GRADES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_GRADES).map(|g| self.counts[g][g]).sum()
    }

    /// True-class support of grade `g`.
    pub fn support(&self, g: usize) -> u64 {
        self.counts[g].iter().sum()
    }

    pub fn predicted(&self, g: usize) -> u64 {
        self.counts.iter().map(|row| row[g]).sum()
    }
}

fn label_index(v: usize, what: &str) -> Result<usize> {
    if v < NUM_GRADES {
        Ok(v)
    } else {
        Err(Error::InvalidArgument(format!(
            "{what} label {v} outside 0..{NUM_GRADES}"
        )))
    }
}

pub fn confusion(true_labels: &[usize], pred_labels: &[usize]) -> Result<ConfusionMatrix> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true labels vs {} predictions",
            true_labels.len(),
            pred_labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in true_labels.iter().zip(pred_labels) {
        cm.counts[label_index(t, "true")?][label_index(p, "predicted")?] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeMetrics {
    pub grade: Grade,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Names of the rates whose denominator was zero and were reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeSummary {
    pub accuracy: f64,
    pub per_grade: Vec<GradeMetrics>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn grade_metrics(cm: &ConfusionMatrix) -> Result<GradeSummary> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Metrics("confusion matrix is empty".into()));
    }
    let per_grade: Vec<GradeMetrics> = Grade::ALL
        .iter()
        .map(|&grade| {
            let g = grade.index();
            let tp = cm.counts[g][g];
            let mut undefined = Vec::new();
            let precision = ratio(tp, cm.predicted(g)).unwrap_or_else(|| {
                undefined.push("precision".to_string());
                0.0
            });
            let recall = ratio(tp, cm.support(g)).unwrap_or_else(|| {
                undefined.push("recall".to_string());
                0.0
            });
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                undefined.push("f1".to_string());
                0.0
            };
            GradeMetrics {
                grade,
                precision,
                recall,
                f1,
                support: cm.support(g),
                undefined,
            }
        })
        .collect();
    let macro_f1 = per_grade.iter().map(|m| m.f1).sum::<f64>() / NUM_GRADES as f64;
    let weighted_f1 = per_grade
        .iter()
        .map(|m| m.support as f64 * m.f1)
        .sum::<f64>()
        / total as f64;
    Ok(GradeSummary {
        accuracy: cm.trace() as f64 / total as f64,
        per_grade,
        macro_f1,
        weighted_f1,
    })
}

/// Accuracy per magnification level; levels with no samples are omitted.
pub fn magnification_accuracy(
    tags: &[Magnification],
    true_labels: &[usize],
    pred_labels: &[usize],
) -> Result<BTreeMap<Magnification, f64>> {
    if tags.len() != true_labels.len() || tags.len() != pred_labels.len() {
        return Err(Error::InvalidArgument(
            "magnification tags length mismatch".into(),
        ));
    }
    let mut tally: BTreeMap<Magnification, (u64, u64)> = BTreeMap::new();
    for ((&m, &t), &p) in tags.iter().zip(true_labels).zip(pred_labels) {
        let e = tally.entry(m).or_default();
        e.0 += (t == p) as u64;
        e.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(m, (hit, n))| (m, hit as f64 / n as f64))
        .collect())
}

/// Everything reported for one evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: u64,
    pub accuracy: f64,
    pub per_grade: Vec<GradeMetrics>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_magnification_accuracy: BTreeMap<Magnification, f64>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_predictions(
        true_labels: &[usize],
        pred_labels: &[usize],
        tags: &[Magnification],
    ) -> Result<MetricsReport> {
        let cm = confusion(true_labels, pred_labels)?;
        let summary = grade_metrics(&cm)?;
        Ok(MetricsReport {
            n_samples: cm.total(),
            accuracy: summary.accuracy,
            per_grade: summary.per_grade,
            macro_f1: summary.macro_f1,
            weighted_f1: summary.weighted_f1,
            per_magnification_accuracy: magnification_accuracy(tags, true_labels, pred_labels)?,
            confusion: cm,
        })
    }

    pub fn grade(&self, g: Grade) -> &GradeMetrics {
        &self.per_grade[g.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 2, 1, 0];
        let cm = confusion(&labels, &labels).unwrap();
        assert_eq!(cm.counts, [[2, 0, 0], [0, 2, 0], [0, 0, 2]]);
        let s = grade_metrics(&cm).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!((s.macro_f1, s.weighted_f1), (1.0, 1.0));
        assert!(s
            .per_grade
            .iter()
            .all(|m| m.precision == 1.0 && m.recall == 1.0));
    }

    #[test]
    fn empty_input() {
        let cm = confusion(&[], &[]).unwrap();
        assert_eq!(cm, ConfusionMatrix::default());
        assert!(matches!(grade_metrics(&cm), Err(Error::Metrics(_))));
    }

    #[test]
    fn out_of_range_and_length_mismatch() {
        assert!(confusion(&[0, 3], &[0, 0]).is_err());
        assert!(confusion(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn absent_grade_is_flagged_not_fatal() {
        let cm = confusion(&[0, 0, 1], &[0, 1, 1]).unwrap();
        let s = grade_metrics(&cm).unwrap();
        let g3 = &s.per_grade[2];
        assert_eq!((g3.precision, g3.recall, g3.f1), (0.0, 0.0, 0.0));
        assert_eq!(g3.undefined, ["precision", "recall", "f1"]);
        assert!(s.macro_f1.is_finite());
    }

    #[test]
    fn single_level_map_equals_overall() {
        let t = [0, 1, 2, 1];
        let p = [0, 2, 2, 1];
        let tags = [Magnification::X20; 4];
        let r = MetricsReport::from_predictions(&t, &p, &tags).unwrap();
        assert_eq!(r.per_magnification_accuracy.len(), 1);
        assert_eq!(
            r.per_magnification_accuracy[&Magnification::X20],
            r.accuracy
        );
    }

    #[test]
    fn report_json_shape() {
        let r = MetricsReport::from_predictions(&[0, 1, 2], &[0, 1, 1], &[Magnification::X4; 3])
            .unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(
            v["confusion"],
            serde_json::json!([[1, 0, 0], [0, 1, 0], [0, 1, 0]])
        );
        assert!(v["per_magnification_accuracy"]["4x"].is_number());
        assert!(v["macro_f1"].is_number());
        let back: MetricsReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
