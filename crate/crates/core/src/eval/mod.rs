//! Frozen-feature evaluation: extraction, base/adapted ensembling, k-NN and
//! linear probing.

mod knn;
mod probe;

use serde::{Deserialize, Serialize};

pub use knn::{knn_classify, knn_predict, Metric};
pub use probe::{linear_probe, ProbeConfig, ProbeResult};

use crate::adapters::AdapterSet;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Encoder, Graph, ParamStore};
use crate::numcore::Tensor;

/// Encoder features with their class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub tag: String,
}

impl FeatureBank {
    pub fn new(features: Tensor, labels: Vec<usize>, tag: impl Into<String>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Shape(format!("{:?} features for {} labels", features.shape(), labels.len())));
        }
        if let Some(i) = features.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature in row {}", i / features.cols())));
        }
        Ok(Self { features, labels, tag: tag.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

pub const EXTRACT_BATCH: usize = 250;

/// Un-augmented encoder features of every image, in dataset order.
pub fn extract(
    encoder: &Encoder,
    store: &ParamStore,
    adapters: Option<&AdapterSet>,
    ds: &Dataset,
    tag: &str,
) -> Result<FeatureBank> {
    let n = ds.len();
    let mut feats = Vec::with_capacity(n * encoder.config.embed_dim);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EXTRACT_BATCH) {
        let images = ds.gather(chunk);
        let mut g = Graph::no_grad(store);
        let f = encoder.forward(&mut g, adapters, &images)?;
        feats.extend_from_slice(g.tape.value(f));
    }
    FeatureBank::new(Tensor::new(&[n, encoder.config.embed_dim], feats)?, ds.labels.clone(), tag)
}

/// Rows divided by their L2 norm (zero rows stay zero).
pub fn l2_normalize_rows(t: &Tensor) -> Tensor {
    let d = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Tensor::new(t.shape(), out).expect("same shape")
}

/// Concatenates two banks over the same samples; with `normalize`, each bank
/// is row-normalized first so neither dominates by scale.
pub fn ensemble(a: &FeatureBank, b: &FeatureBank, normalize: bool) -> Result<FeatureBank> {
    if a.labels != b.labels {
        return Err(Error::Contract(format!(
            "ensemble banks disagree on samples ({} vs {} rows, or label order)",
            a.len(),
            b.len()
        )));
    }
    let (fa, fb) = if normalize {
        (l2_normalize_rows(&a.features), l2_normalize_rows(&b.features))
    } else {
        (a.features.clone(), b.features.clone())
    };
    let (da, db) = (a.dim(), b.dim());
    let mut out = Vec::with_capacity(a.len() * (da + db));
    for i in 0..a.len() {
        out.extend_from_slice(fa.row(i));
        out.extend_from_slice(fb.row(i));
    }
    FeatureBank::new(Tensor::new(&[a.len(), da + db], out)?, a.labels.clone(), format!("{}+{}", a.tag, b.tag))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub protocol: String,
    pub k: Option<usize>,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    pub model_tags: Vec<String>,
}

impl EvalResult {
    pub fn knn(train: &FeatureBank, test: &FeatureBank, k: usize, metric: Metric) -> Result<Self> {
        Ok(Self {
            protocol: "knn".into(),
            k: Some(k),
            accuracy: knn_classify(train, test, k, metric)?,
            n_train: train.len(),
            n_test: test.len(),
            feature_dim: train.dim(),
            model_tags: train.tag.split('+').map(str::to_string).collect(),
        })
    }

    pub fn linear(train: &FeatureBank, test: &FeatureBank, cfg: &ProbeConfig) -> Result<Self> {
        Ok(Self {
            protocol: "linear".into(),
            k: None,
            accuracy: linear_probe(train, test, cfg)?.test_acc,
            n_train: train.len(),
            n_test: test.len(),
            feature_dim: train.dim(),
            model_tags: train.tag.split('+').map(str::to_string).collect(),
        })
    }
}

/// Features of one model on both domains, each split into a labelled
/// reference (train) bank and a query (test) bank.
#[derive(Clone, Debug)]
pub struct DomainBanks {
    pub source_train: FeatureBank,
    pub source_test: FeatureBank,
    pub target_train: FeatureBank,
    pub target_test: FeatureBank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub source_acc_base: f64,
    pub source_acc_adapted: f64,
    pub source_acc_ensemble: f64,
    pub target_acc_base: f64,
    pub target_acc_adapted: f64,
    pub target_acc_ensemble: f64,
    /// Ensemble minus un-ensembled adapted accuracy, per domain.
    pub source_ensemble_gap: f64,
    pub target_ensemble_gap: f64,
}

/// k-NN accuracies of base, adapted and ensembled features on both domains.
pub fn forgetting_report(base: &DomainBanks, adapted: &DomainBanks, k: usize) -> Result<ForgettingReport> {
    let acc = |tr: &FeatureBank, te: &FeatureBank| knn_classify(tr, te, k, Metric::Cosine);
    let ens = |b: &FeatureBank, a: &FeatureBank| ensemble(b, a, true);
    let source_acc_base = acc(&base.source_train, &base.source_test)?;
    let source_acc_adapted = acc(&adapted.source_train, &adapted.source_test)?;
    let source_acc_ensemble =
        acc(&ens(&base.source_train, &adapted.source_train)?, &ens(&base.source_test, &adapted.source_test)?)?;
    let target_acc_base = acc(&base.target_train, &base.target_test)?;
    let target_acc_adapted = acc(&adapted.target_train, &adapted.target_test)?;
    let target_acc_ensemble =
        acc(&ens(&base.target_train, &adapted.target_train)?, &ens(&base.target_test, &adapted.target_test)?)?;
    Ok(ForgettingReport {
        source_acc_base,
        source_acc_adapted,
        source_acc_ensemble,
        target_acc_base,
        target_acc_adapted,
        target_acc_ensemble,
        source_ensemble_gap: source_acc_ensemble - source_acc_adapted,
        target_ensemble_gap: target_acc_ensemble - target_acc_adapted,
    })
}
