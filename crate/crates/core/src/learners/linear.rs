//! L2-regularized logistic regression trained by full-batch gradient descent
//! on standardized features.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{clamp_prob, sigmoid, softplus_neg, Matrix};
use crate::{Error, Result};

pub const LR_MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrConfig {
    pub l2: f64,
    pub epochs: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            l2: 1e-4,
            epochs: 50,
            step: 0.1,
            seed: 0,
        }
    }
}

/// Logistic regression with per-feature standardization baked in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearModel {
    pub version: u32,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub means: Vec<f64>,
    /// Per-feature standard deviation; 0 is replaced by 1 so constant
    /// features pass through centered.
    pub stds: Vec<f64>,
    pub config: LrConfig,
    pub train_loss: Vec<f64>,
}

impl LinearModel {
    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    /// Match probability for a raw (unstandardized) feature row.
    pub fn predict(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.weights.len());
        let mut z = self.bias;
        for i in 0..x.len() {
            z += self.weights[i] * (x[i] - self.means[i]) / self.stds[i];
        }
        clamp_prob(sigmoid(z))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<LinearModel> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let model: LinearModel = serde_json::from_reader(BufReader::new(file))?;
        if model.version != LR_MODEL_VERSION {
            return Err(Error::ModelVersion {
                found: model.version,
                expected: LR_MODEL_VERSION,
            });
        }
        Ok(model)
    }
}

/// Mean logistic loss plus L2 penalty, and its gradient, on standardized
/// data. Exposed so the gradient can be checked against finite differences.
pub fn lr_loss_grad(
    x: &Matrix,
    y: &[u8],
    weights: &[f64],
    bias: f64,
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = x.rows as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; x.cols];
    let mut grad_b = 0.0;
    for r in 0..x.rows {
        let row = x.row(r);
        let mut z = bias;
        for i in 0..x.cols {
            z += weights[i] * row[i];
        }
        let sign = if y[r] == 1 { 1.0 } else { -1.0 };
        loss += softplus_neg(sign * z);
        let residual = sigmoid(z) - f64::from(y[r]);
        for i in 0..x.cols {
            grad_w[i] += residual * row[i];
        }
        grad_b += residual;
    }
    loss /= n;
    grad_b /= n;
    let mut penalty = 0.0;
    for i in 0..x.cols {
        grad_w[i] = grad_w[i] / n + l2 * weights[i];
        penalty += weights[i] * weights[i];
    }
    loss += 0.5 * l2 * penalty;
    (loss, grad_w, grad_b)
}

fn standardize(x: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
    let n = x.rows as f64;
    let mut means = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (m, v) in means.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut vars = vec![0.0; x.cols];
    for r in 0..x.rows {
        for i in 0..x.cols {
            let d = x.row(r)[i] - means[i];
            vars[i] += d * d;
        }
    }
    let stds: Vec<f64> = vars
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s == 0.0 {
                1.0
            } else {
                s
            }
        })
        .collect();
    let mut xs = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let out = xs.row_mut(r);
        for i in 0..x.cols {
            out[i] = (row[i] - means[i]) / stds[i];
        }
    }
    (xs, means, stds)
}

/// Train by full-batch gradient descent. A halving line search keeps the
/// recorded per-epoch loss non-increasing.
pub fn train_lr(x: &Matrix, y: &[u8], config: &LrConfig) -> Result<LinearModel> {
    if x.rows == 0 || x.rows != y.len() {
        return Err(Error::invalid("training set is empty or misaligned"));
    }
    let positives = y.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == y.len() {
        return Err(Error::invalid("training labels contain a single class"));
    }

    let (xs, means, stds) = standardize(x);
    let mut weights = vec![0.0; x.cols];
    let mut bias = 0.0;
    let mut train_loss = Vec::with_capacity(config.epochs + 1);
    let (mut loss, mut grad_w, mut grad_b) = lr_loss_grad(&xs, y, &weights, bias, config.l2);
    train_loss.push(loss);

    let mut step = config.step;
    for _ in 0..config.epochs {
        let mut tried = step;
        let mut accepted = false;
        for _ in 0..40 {
            let cand_w: Vec<f64> = weights
                .iter()
                .zip(&grad_w)
                .map(|(w, g)| w - tried * g)
                .collect();
            let cand_b = bias - tried * grad_b;
            let (cand_loss, cand_gw, cand_gb) = lr_loss_grad(&xs, y, &cand_w, cand_b, config.l2);
            if cand_loss <= loss {
                weights = cand_w;
                bias = cand_b;
                loss = cand_loss;
                grad_w = cand_gw;
                grad_b = cand_gb;
                accepted = true;
                break;
            }
            tried /= 2.0;
        }
        if accepted {
            step = (tried * 2.0).min(config.step);
        }
        train_loss.push(loss);
    }

    Ok(LinearModel {
        version: LR_MODEL_VERSION,
        weights,
        bias,
        means,
        stds,
        config: config.clone(),
        train_loss,
    })
}
