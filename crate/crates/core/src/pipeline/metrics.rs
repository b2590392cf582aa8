//! Evaluation metrics.
//!
//! Sentiment scores are binarized as negative (`< 0`) versus non-negative
//! (`>= 0`). Seven-class accuracy compares rounded scores after clamping to
//! `[-3, 3]`. Accuracies, F1, precision and recall are percentages.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// Headline accuracy: ACC7 for regression, ACC2 for binary tasks.
    pub accuracy: f64,
    pub acc7: Option<f64>,
    pub acc2: f64,
    /// F1 of the positive (non-negative) class.
    pub f1: f64,
    /// Support-weighted mean of the per-class F1 scores.
    pub f1_weighted: f64,
    pub precision: f64,
    pub recall: f64,
    pub mae: Option<f64>,
    pub corr: Option<f64>,
}

/// Confusion counts of a binary decision with class 1 as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// The same counts with the roles of the two classes exchanged.
    pub fn flipped(&self) -> Self {
        Confusion {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }

    pub fn weighted_f1(&self) -> f64 {
        let pos = (self.tp + self.fn_) as f64;
        let neg = (self.tn + self.fp) as f64;
        if pos + neg == 0.0 {
            return 0.0;
        }
        (pos * self.f1() + neg * self.flipped().f1()) / (pos + neg)
    }
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
    }
}

fn seven_class(score: f64) -> i64 {
    score.clamp(-3.0, 3.0).round() as i64
}

fn binary_metrics(c: Confusion) -> (f64, f64, f64, f64, f64) {
    (
        100.0 * c.accuracy(),
        100.0 * c.f1(),
        100.0 * c.weighted_f1(),
        100.0 * c.precision(),
        100.0 * c.recall(),
    )
}

/// Metrics of continuous sentiment predictions.
pub fn regression_metrics(pred: &[f64], labels: &[f64]) -> Metrics {
    assert_eq!(pred.len(), labels.len(), "one prediction per label");
    let n = pred.len().max(1) as f64;
    let acc7 = 100.0
        * pred
            .iter()
            .zip(labels)
            .filter(|(p, l)| seven_class(**p) == seven_class(**l))
            .count() as f64
        / n;
    let conf = Confusion::from_pairs(
        &pred.iter().map(|&p| p >= 0.0).collect::<Vec<_>>(),
        &labels.iter().map(|&l| l >= 0.0).collect::<Vec<_>>(),
    );
    let (acc2, f1, f1_weighted, precision, recall) = binary_metrics(conf);
    let mae = pred.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum::<f64>() / n;
    Metrics {
        accuracy: acc7,
        acc7: Some(acc7),
        acc2,
        f1,
        f1_weighted,
        precision,
        recall,
        mae: Some(mae),
        corr: Some(pearson(pred, labels)),
    }
}

/// Metrics of two-class decisions.
pub fn classification_metrics(pred: &[usize], truth: &[usize]) -> Metrics {
    assert_eq!(pred.len(), truth.len(), "one prediction per label");
    let conf = Confusion::from_pairs(
        &pred.iter().map(|&p| p == 1).collect::<Vec<_>>(),
        &truth.iter().map(|&t| t == 1).collect::<Vec<_>>(),
    );
    let (acc2, f1, f1_weighted, precision, recall) = binary_metrics(conf);
    Metrics {
        accuracy: acc2,
        acc7: None,
        acc2,
        f1,
        f1_weighted,
        precision,
        recall,
        mae: None,
        corr: None,
    }
}
