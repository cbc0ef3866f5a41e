//! Confusion matrices, accuracy and macro-F1.

use serde::{Deserialize, Serialize};

use crate::dataset::{Label, LabelSchema};
use crate::error::{Error, Result};

/// Counts indexed by (gold, predicted), in schema label order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<Label>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(schema: &LabelSchema) -> Self {
        let n = schema.len();
        ConfusionMatrix {
            labels: schema.labels().to_vec(),
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_counts(schema: &LabelSchema, counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = schema.len();
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument(format!("confusion matrix must be {n}×{n}")));
        }
        Ok(ConfusionMatrix {
            labels: schema.labels().to_vec(),
            counts,
        })
    }

    /// Builds from parallel gold/predicted index vectors.
    pub fn from_indices(schema: &LabelSchema, gold: &[usize], predicted: &[usize]) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::InvalidArgument("gold and predicted lengths differ".into()));
        }
        let mut m = ConfusionMatrix::new(schema);
        for (&g, &p) in gold.iter().zip(predicted) {
            m.record(g, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, gold: usize, predicted: usize) -> Result<()> {
        let n = self.labels.len();
        if gold >= n || predicted >= n {
            return Err(Error::InvalidArgument("label index out of range".into()));
        }
        self.counts[gold][predicted] += 1;
        Ok(())
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }
}

/// `trace / total`; zero for an empty matrix.
pub fn accuracy(m: &ConfusionMatrix) -> f64 {
    let total = m.total();
    if total == 0 {
        return 0.0;
    }
    m.trace() as f64 / total as f64
}

/// Per-label (precision, recall, F1). Undefined ratios are 0.
pub fn per_label_f1(m: &ConfusionMatrix) -> Vec<(f64, f64, f64)> {
    (0..m.labels().len())
        .map(|i| {
            let tp = m.counts()[i][i] as f64;
            let predicted = m.col_sum(i) as f64;
            let gold = m.row_sum(i) as f64;
            let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let r = if gold > 0.0 { tp / gold } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (p, r, f)
        })
        .collect()
}

/// Unweighted mean of per-label F1 over every schema label.
pub fn macro_f1(m: &ConfusionMatrix) -> f64 {
    let f = per_label_f1(m);
    if f.is_empty() {
        return 0.0;
    }
    f.iter().map(|(_, _, f1)| f1).sum::<f64>() / f.len() as f64
}

/// Each row divided by its sum, in percent. Rows without gold instances are
/// reported as zeros.
pub fn confusion_report(m: &ConfusionMatrix) -> Vec<Vec<f64>> {
    m.counts()
        .iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            row.iter()
                .map(|&c| if s > 0 { 100.0 * c as f64 / s as f64 } else { 0.0 })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two() -> LabelSchema {
        LabelSchema::new("two", &["a", "b"]).unwrap()
    }

    #[test]
    fn diagonal_is_perfect() {
        let m = ConfusionMatrix::from_counts(&LabelSchema::scicite(), vec![vec![4, 0, 0], vec![0, 2, 0], vec![0, 0, 7]]).unwrap();
        assert_eq!(accuracy(&m), 1.0);
        assert_eq!(macro_f1(&m), 1.0);
    }

    #[test]
    fn hand_case() {
        let m = ConfusionMatrix::from_counts(&two(), vec![vec![3, 1], vec![2, 4]]).unwrap();
        let f = per_label_f1(&m);
        assert!((f[0].0 - 0.6).abs() < 1e-12);
        assert!((f[0].1 - 0.75).abs() < 1e-12);
        assert!((f[0].2 - 2.0 / 3.0).abs() < 1e-12);
        assert!((f[1].0 - 0.8).abs() < 1e-12);
        assert!((f[1].2 - 0.8 / 1.1).abs() < 1e-12);
        assert!((macro_f1(&m) - 0.6970).abs() < 5e-5);
        assert!((accuracy(&m) - 0.7).abs() < 1e-12);
        let r = confusion_report(&m);
        assert_eq!(r[0], vec![75.0, 25.0]);
        assert!((r[1][0] - 33.333333).abs() < 1e-5);
        assert!((r[1][1] - 66.666667).abs() < 1e-5);
    }

    #[test]
    fn absent_label_scores_zero() {
        let m = ConfusionMatrix::from_counts(&LabelSchema::scicite(), vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 0]]).unwrap();
        assert!((macro_f1(&m) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(confusion_report(&m)[2], vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_report() {
        let m = ConfusionMatrix::from_counts(&two(), vec![vec![5, 0], vec![0, 9]]).unwrap();
        assert_eq!(confusion_report(&m), vec![vec![100.0, 0.0], vec![0.0, 100.0]]);
    }

    #[test]
    fn shape_errors() {
        assert!(ConfusionMatrix::from_counts(&two(), vec![vec![1]]).is_err());
        assert!(ConfusionMatrix::from_indices(&two(), &[0], &[0, 1]).is_err());
        assert!(ConfusionMatrix::from_indices(&two(), &[2], &[0]).is_err());
    }
}
