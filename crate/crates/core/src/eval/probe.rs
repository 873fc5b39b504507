use serde::{Deserialize, Serialize};

use super::FeatureBank;
use crate::error::{Error, Result};
use crate::numcore::{gemm, softmax_in_place};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Per-dimension standardization with train-set statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.1, weight_decay: 1e-4, standardize: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_acc: f64,
    pub test_acc: f64,
    pub final_loss: f64,
}

fn standardizer(x: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut var = vec![0.0; d];
    for row in x.chunks_exact(d) {
        var.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n as f64);
    }
    let inv_std = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    (mean, inv_std)
}

fn apply(x: &[f64], d: usize, mean: &[f64], inv_std: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(inv_std) {
            *v = (*v - m) * s;
        }
    }
    out
}

/// `x · Wᵀ + b` followed by a row softmax.
fn probs(x: &[f64], n: usize, d: usize, w: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    let mut z = vec![0.0; n * c];
    for row in z.chunks_exact_mut(c) {
        row.copy_from_slice(b);
    }
    gemm(n, d, c, x, false, w, true, 1.0, &mut z);
    for row in z.chunks_exact_mut(c) {
        softmax_in_place(row);
    }
    z
}

fn accuracy(p: &[f64], c: usize, labels: &[usize]) -> f64 {
    let hits = p
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let arg = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            arg == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Multinomial logistic regression on frozen features, trained by
/// full-batch gradient descent from zero weights.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract("linear probe needs non-empty train and test banks".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!("train width {} vs test width {}", train.dim(), test.dim())));
    }
    let c = train.labels.iter().chain(&test.labels).max().map_or(0, |m| m + 1);
    let mut distinct = train.labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Contract("linear probe needs at least 2 classes in train".into()));
    }
    let (n, d) = (train.len(), train.dim());
    let (xtr, xte) = if cfg.standardize {
        let (mean, inv_std) = standardizer(train.features.data(), n, d);
        (apply(train.features.data(), d, &mean, &inv_std), apply(test.features.data(), d, &mean, &inv_std))
    } else {
        (train.features.data().to_vec(), test.features.data().to_vec())
    };

    let mut w = vec![0.0; c * d];
    let mut b = vec![0.0; c];
    let mut gw = vec![0.0; c * d];
    let mut loss = f64::NAN;
    for step in 0..=cfg.steps {
        let mut p = probs(&xtr, n, d, &w, &b, c);
        loss = p.chunks_exact(c).zip(&train.labels).map(|(row, &l)| -row[l].max(1e-300).ln()).sum::<f64>() / n as f64
            + 0.5 * cfg.weight_decay * w.iter().map(|v| v * v).sum::<f64>();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("linear probe loss is {loss} at step {step}")));
        }
        if step == cfg.steps {
            break;
        }
        // dL/dz = (p - onehot) / n
        for (row, &l) in p.chunks_exact_mut(c).zip(&train.labels) {
            row[l] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
        gemm(c, n, d, &p, true, &xtr, false, 0.0, &mut gw);
        for (j, bj) in b.iter_mut().enumerate() {
            *bj -= cfg.lr * p.iter().skip(j).step_by(c).sum::<f64>();
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= cfg.lr * (g + cfg.weight_decay * *wv);
        }
    }
    let train_acc = accuracy(&probs(&xtr, n, d, &w, &b, c), c, &train.labels);
    let test_acc = accuracy(&probs(&xte, test.len(), d, &w, &b, c), c, &test.labels);
    Ok(ProbeResult { train_acc, test_acc, final_loss: loss })
}
