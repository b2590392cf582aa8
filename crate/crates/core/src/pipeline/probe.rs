//! Linear probe: a ridge least-squares classifier on frozen features.
//!
//! Features are standardized with training statistics, a bias column is
//! appended, and one-hot class targets are fitted in closed form. The
//! predicted class is the arg-max of the fitted scores.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{DhmdError, Result};

pub const DEFAULT_RIDGE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[dim + 1, classes]`.
    weights: DMatrix<f64>,
}

fn design(rows: &[Vec<f64>], mean: &[f64], scale: &[f64]) -> DMatrix<f64> {
    let d = mean.len();
    DMatrix::from_fn(rows.len(), d + 1, |i, j| {
        if j == d {
            1.0
        } else {
            (rows[i][j] - mean[j]) / scale[j]
        }
    })
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], classes: &[usize], num_classes: usize, ridge: f64) -> Result<Self> {
        if features.is_empty() || features.len() != classes.len() {
            return Err(DhmdError::EmptySplit("probe needs one class per non-empty feature row".into()));
        }
        let d = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for r in features {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for r in features {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let x = design(features, &mean, &scale);
        let y = DMatrix::from_fn(features.len(), num_classes, |i, c| if classes[i] == c { 1.0 } else { 0.0 });
        let mut gram = x.transpose() * &x;
        for i in 0..d {
            gram[(i, i)] += ridge * n;
        }
        let rhs = x.transpose() * y;
        let weights = gram
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| gram.lu().solve(&rhs))
            .ok_or_else(|| DhmdError::Shape("probe normal equations are singular".into()))?;
        Ok(LinearProbe { mean, scale, weights })
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Vec<usize> {
        let scores = design(features, &self.mean, &self.scale) * &self.weights;
        (0..scores.nrows())
            .map(|i| {
                let row = scores.row(i);
                (0..row.len())
                    .fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect()
    }

    /// Accuracy in percent.
    pub fn accuracy(&self, features: &[Vec<f64>], classes: &[usize]) -> f64 {
        let pred = self.predict(features);
        let hits = pred.iter().zip(classes).filter(|(p, c)| p == c).count();
        100.0 * hits as f64 / classes.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Test accuracy per modality (L, V, A), percent.
    pub accuracy: Vec<f64>,
    /// Population standard deviation of `accuracy`.
    pub std: f64,
    /// Which features were probed.
    pub features: String,
}

pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}
