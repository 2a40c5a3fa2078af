//! Confusion matrices and one-vs-rest metrics.
//!
//! A metric whose denominator is zero is `None` (serialised as `null`) and is
//! left out of the macro average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if c == 0 || rows.iter().any(|r| r.len() != c) {
            return Err(Error::invalid(
                "confusion matrix",
                "counts must be a non-empty square table",
            ));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid(
                "confusion matrix",
                "truth and prediction lengths differ",
            ));
        }
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for v in [truth, predicted] {
            if v >= self.classes {
                return Err(Error::IndexOutOfBounds {
                    index: v,
                    extent: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// `(tp, fn, fp, tn)` for `class` against the rest.
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64, u64) {
        let tp = self.get(class, class);
        let row: u64 = (0..self.classes).map(|j| self.get(class, j)).sum();
        let col: u64 = (0..self.classes).map(|i| self.get(i, class)).sum();
        let (fn_, fp) = (row - tp, col - tp);
        (tp, fn_, fp, self.total() - tp - fn_ - fp)
    }

    /// Comma-separated table with a header row and a leading label column.
    pub fn to_csv(&self, names: &[String]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.names(names));
        w.write_record(&header)?;
        for (i, name) in self.names(names).into_iter().enumerate() {
            let mut row = vec![name];
            row.extend((0..self.classes).map(|j| self.get(i, j).to_string()));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    fn names(&self, names: &[String]) -> Vec<String> {
        (0..self.classes)
            .map(|i| names.get(i).cloned().unwrap_or_else(|| format!("class{i}")))
            .collect()
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: u64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAverages {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub total: u64,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroAverages,
    pub confusion: ConfusionMatrix,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix, names: &[String]) -> Result<Self> {
        let total = confusion.total();
        if total == 0 {
            return Err(Error::Data("cannot score an empty split".into()));
        }
        let labels = confusion.names(names);
        let per_class: Vec<ClassMetrics> = (0..confusion.classes)
            .map(|c| {
                let (tp, fn_, fp, tn) = confusion.one_vs_rest(c);
                let sensitivity = ratio(tp, tp + fn_);
                let precision = ratio(tp, tp + fp);
                let f1 = match (precision, sensitivity) {
                    (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                    _ => None,
                };
                ClassMetrics {
                    class: labels[c].clone(),
                    support: tp + fn_,
                    sensitivity,
                    specificity: ratio(tn, tn + fp),
                    precision,
                    f1,
                }
            })
            .collect();
        let macro_avg = MacroAverages {
            sensitivity: mean_defined(per_class.iter().map(|m| m.sensitivity)),
            specificity: mean_defined(per_class.iter().map(|m| m.specificity)),
            precision: mean_defined(per_class.iter().map(|m| m.precision)),
            f1: mean_defined(per_class.iter().map(|m| m.f1)),
        };
        Ok(Self {
            accuracy: confusion.trace() as f64 / total as f64,
            total,
            per_class,
            macro_avg,
            confusion,
        })
    }

    pub fn from_predictions(names: &[String], truth: &[usize], predicted: &[usize]) -> Result<Self> {
        let cm = ConfusionMatrix::from_predictions(names.len(), truth, predicted)?;
        Self::from_confusion(cm, names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn hand_case() {
        let cm = ConfusionMatrix::from_counts(&[vec![8, 2], vec![1, 9]]).unwrap();
        let r = MetricsReport::from_confusion(cm, &names(2)).unwrap();
        assert!((r.accuracy - 0.85).abs() < 1e-15);
        let c0 = &r.per_class[0];
        assert!((c0.sensitivity.unwrap() - 0.8).abs() < 1e-15);
        assert!((c0.precision.unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert!((c0.specificity.unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_degenerate() {
        let r = MetricsReport::from_predictions(&names(3), &[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for m in &r.per_class {
            assert_eq!(
                (m.sensitivity, m.specificity, m.precision, m.f1),
                (Some(1.0), Some(1.0), Some(1.0), Some(1.0))
            );
        }
        let r = MetricsReport::from_predictions(&names(3), &[0, 0, 1], &[0, 1, 1]).unwrap();
        assert_eq!(r.per_class[2].sensitivity, None);
        assert_eq!(r.per_class[2].precision, None);
        assert_eq!(r.macro_avg.sensitivity, Some((1.0 / 2.0 + 1.0) / 2.0));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"sensitivity\":null"));
        assert!(MetricsReport::from_predictions(&names(2), &[], &[]).is_err());
    }

    #[test]
    fn csv_export() {
        let cm = ConfusionMatrix::from_counts(&[vec![8, 2], vec![1, 9]]).unwrap();
        let text = cm.to_csv(&["a".into(), "b".into()]).unwrap();
        assert_eq!(text, "true\\predicted,a,b\na,8,2\nb,1,9\n");
    }
}
