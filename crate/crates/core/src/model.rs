//! Linear softmax classifier, used both as teacher and as student.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::features::FeatureMatrix;
use crate::logits::{log_softmax_slice, LogitVector};

/// `logits = W x + b` with `W` stored row-major as `C x d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub num_classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            num_classes,
            dim,
            weights: vec![0.0; num_classes * dim],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.dim == 0 {
            return Err(invalid("linear model needs C >= 2 and d >= 1"));
        }
        if self.weights.len() != self.num_classes * self.dim || self.bias.len() != self.num_classes
        {
            return Err(invalid("linear model parameter shapes do not match C x d"));
        }
        if self
            .weights
            .iter()
            .chain(&self.bias)
            .any(|v| !v.is_finite())
        {
            return Err(invalid("linear model has non-finite parameters"));
        }
        Ok(())
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn logits_raw(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| self.bias[c] + self.row(c).iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Result<LogitVector> {
        LogitVector::new(self.logits_raw(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits_raw(x);
        let mut best = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, data: &FeatureMatrix) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data
            .rows()
            .iter()
            .zip(data.labels())
            .filter(|(x, &y)| self.predict(x) == y as usize)
            .count();
        hits as f64 / data.len() as f64
    }

    /// Accumulates `scale * g x^T` into the weights and `scale * g` into the bias.
    pub(crate) fn add_outer(&mut self, g: &[f64], x: &[f64], scale: f64) {
        for (c, &gc) in g.iter().enumerate() {
            let s = scale * gc;
            self.bias[c] += s;
            for (w, v) in self.weights[c * self.dim..(c + 1) * self.dim]
                .iter_mut()
                .zip(x)
            {
                *w += s * v;
            }
        }
    }
}

/// Options for [`fit_logistic_regression`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression by full-batch gradient descent on the mean
/// cross-entropy plus `l2/2 |W|²`. Deterministic; starts from zero weights.
pub fn fit_logistic_regression(
    data: &FeatureMatrix,
    num_classes: usize,
    cfg: &FitConfig,
) -> Result<LinearModel> {
    if data.is_empty() {
        return Err(invalid("cannot fit on an empty dataset"));
    }
    if num_classes < 2 {
        return Err(invalid("need at least 2 classes"));
    }
    let d = data.dim();
    let n = data.len() as f64;
    let mut model = LinearModel::zeros(num_classes, d);
    let mut grad = LinearModel::zeros(num_classes, d);
    for _ in 0..cfg.iterations {
        grad.weights.iter_mut().for_each(|g| *g = 0.0);
        grad.bias.iter_mut().for_each(|g| *g = 0.0);
        for (x, &y) in data.rows().iter().zip(data.labels()) {
            let mut p: Vec<f64> = log_softmax_slice(&model.logits_raw(x), 1.0)
                .into_iter()
                .map(f64::exp)
                .collect();
            p[y as usize] -= 1.0;
            grad.add_outer(&p, x, 1.0 / n);
        }
        for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
            *w -= cfg.learning_rate * (g + cfg.l2 * *w);
        }
        for (b, g) in model.bias.iter_mut().zip(&grad.bias) {
            *b -= cfg.learning_rate * g;
        }
    }
    model.validate()?;
    Ok(model)
}
