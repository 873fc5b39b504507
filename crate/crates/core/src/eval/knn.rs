use serde::{Deserialize, Serialize};

use super::{l2_normalize_rows, FeatureBank};
use crate::error::{Error, Result};
use crate::numcore::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

/// Test-by-train similarity matrix (higher is closer).
fn similarities(train: &FeatureBank, test: &FeatureBank, metric: Metric) -> Vec<f64> {
    let (n, m, d) = (train.len(), test.len(), train.dim());
    let mut sims = vec![0.0; m * n];
    match metric {
        Metric::Cosine => {
            let a = l2_normalize_rows(&test.features);
            let b = l2_normalize_rows(&train.features);
            gemm(m, d, n, a.data(), false, b.data(), true, 0.0, &mut sims);
        }
        Metric::Euclidean => {
            for i in 0..m {
                let q = test.features.row(i);
                for j in 0..n {
                    let r = train.features.row(j);
                    sims[i * n + j] = -q.iter().zip(r).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                }
            }
        }
    }
    sims
}

/// Majority vote over the `k` most similar train rows. Neighbors are ranked
/// by similarity, then by train index; vote ties go to the larger summed
/// similarity, then to the lower class id.
pub fn knn_predict(train: &FeatureBank, test: &FeatureBank, k: usize, metric: Metric) -> Result<Vec<usize>> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract("k-NN needs non-empty train and test banks".into()));
    }
    if k == 0 || k > train.len() {
        return Err(Error::Contract(format!("k must be in [1, {}], got {k}", train.len())));
    }
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!("train width {} vs test width {}", train.dim(), test.dim())));
    }
    let n = train.len();
    let classes = train.labels.iter().max().map_or(0, |m| m + 1);
    let sims = similarities(train, test, metric);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut votes = vec![0usize; classes];
    let mut mass = vec![0.0f64; classes];
    let preds = sims
        .chunks_exact(n)
        .map(|row| {
            order.clear();
            order.extend(0..n);
            let rank = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
            if k < n {
                order.select_nth_unstable_by(k - 1, rank);
            }
            votes.iter_mut().for_each(|v| *v = 0);
            mass.iter_mut().for_each(|v| *v = 0.0);
            for &j in &order[..k] {
                votes[train.labels[j]] += 1;
                mass[train.labels[j]] += row[j];
            }
            (0..classes)
                .max_by(|&a, &b| votes[a].cmp(&votes[b]).then(mass[a].total_cmp(&mass[b])).then(b.cmp(&a)))
                .expect("at least one class")
        })
        .collect();
    Ok(preds)
}

/// Top-1 accuracy of [`knn_predict`].
pub fn knn_classify(train: &FeatureBank, test: &FeatureBank, k: usize, metric: Metric) -> Result<f64> {
    let preds = knn_predict(train, test, k, metric)?;
    let hits = preds.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / test.len() as f64)
}
