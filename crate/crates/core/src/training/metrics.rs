use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::EpochSet;
use crate::model::LiDsn;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub macro_f1: f64,
    /// F1 of class 1 for two-class problems.
    pub positive_f1: Option<f64>,
    pub per_class: Vec<ClassScores>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self, TrainError> {
        let k = confusion.len();
        if confusion.iter().any(|r| r.len() != k) {
            return Err(TrainError::InvalidConfig("confusion matrix must be square".into()));
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(TrainError::EmptySet("evaluation"));
        }
        let per_class: Vec<ClassScores> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted: usize = confusion.iter().map(|r| r[c]).sum();
                let actual: usize = confusion[c].iter().sum();
                let (precision, recall) = (ratio(tp, predicted), ratio(tp, actual));
                let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
                ClassScores { precision, recall, f1 }
            })
            .collect();
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        Ok(Self {
            acc: ratio(correct, total),
            macro_f1: per_class.iter().map(|s| s.f1).sum::<f64>() / k as f64,
            positive_f1: (k == 2).then(|| per_class[1].f1),
            per_class,
            confusion,
        })
    }

    pub fn from_predictions(predicted: &[usize], labels: &[usize], n_classes: usize) -> Result<Self, TrainError> {
        Self::from_confusion(confusion_matrix(predicted, labels, n_classes)?)
    }

    /// CSV with a header row and one row per true class.
    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut s = String::from("true");
        (0..k).for_each(|c| s.push_str(&format!(",pred_{c}")));
        s.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            s.push_str(&c.to_string());
            row.iter().for_each(|v| s.push_str(&format!(",{v}")));
            s.push('\n');
        }
        s
    }
}

pub fn confusion_matrix(predicted: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>, TrainError> {
    if predicted.len() != labels.len() {
        return Err(TrainError::InvalidConfig(format!("{} predictions for {} labels", predicted.len(), labels.len())));
    }
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(TrainError::InvalidConfig(format!("class index out of range for {n_classes} classes")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Eval-mode arg-max predictions and logits, in chunks of `batch` trials.
pub fn predict(model: &LiDsn, set: &EpochSet, batch: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>), TrainError> {
    let idx: Vec<usize> = (0..set.n_trials()).collect();
    let mut preds = Vec::with_capacity(idx.len());
    let mut logits = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch.max(1)) {
        let out = model.logits(&set.batch(chunk))?;
        let k = out.shape()[1];
        for row in out.data().chunks(k) {
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            preds.push(best);
            logits.push(row.to_vec());
        }
    }
    Ok((preds, logits))
}

pub fn evaluate(model: &LiDsn, set: &EpochSet) -> Result<Metrics, TrainError> {
    let (preds, _) = predict(model, set, 64)?;
    Metrics::from_predictions(&preds, set.labels(), set.n_classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_predictions_on_balanced_set() {
        let m = Metrics::from_predictions(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(m.acc, 0.5);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.positive_f1, Some(0.0));
    }

    #[test]
    fn binary_counts() {
        // TP=3, FP=1, FN=2, TN=4 with class 1 positive.
        let m = Metrics::from_confusion(vec![vec![4, 1], vec![2, 3]]).unwrap();
        let s = m.per_class[1];
        assert_eq!((s.precision, s.recall), (0.75, 0.6));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.acc, 0.7);
        assert_eq!(m.confusion_csv(), "true,pred_0,pred_1\n0,4,1\n1,2,3\n");
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(Metrics::from_confusion(vec![vec![0, 0], vec![0, 0]]), Err(TrainError::EmptySet(_))));
    }
}
