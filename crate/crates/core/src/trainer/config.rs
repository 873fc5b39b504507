use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::cvr::{CvrConfig, GateReference};
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, EncoderConfig, ProjectorConfig};
use crate::ssl::SslConfig;

/// Switches for the center-vector components and the evaluation ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub cv_loss: bool,
    pub cv_lr_reg: bool,
    pub cv_gate: bool,
    pub ensemble: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

impl Toggles {
    pub const NONE: Toggles = Toggles { cv_loss: false, cv_lr_reg: false, cv_gate: false, ensemble: false };
    pub const ALL: Toggles = Toggles { cv_loss: true, cv_lr_reg: true, cv_gate: true, ensemble: true };

    /// The component ablation rows, from plain adaptation to the full method.
    pub fn ablation_grid() -> Vec<(&'static str, Toggles)> {
        let n = Self::NONE;
        vec![
            ("base_only", n),
            ("base+cv_cond", Toggles { cv_gate: true, ..n }),
            ("base+cv_lr_reg", Toggles { cv_lr_reg: true, ..n }),
            ("base+cv_loss", Toggles { cv_loss: true, ..n }),
            ("base+cv_all", Toggles { ensemble: false, ..Self::ALL }),
            ("upstep", Self::ALL),
        ]
    }
}

/// Source-domain pretraining of the base model. Same objective as
/// adaptation, with the full encoder trainable and no center-vector terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Sinkhorn entropy for pretraining from scratch; the adaptation value
    /// is too soft to keep a randomly initialized encoder from collapsing.
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-3, batch_size: 64, sinkhorn_eps: 0.05, sinkhorn_iters: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta0: f64,
    pub s_phi: f64,
    pub lambda_cv: f64,
    pub gate_reference: GateReference,
    pub ssl: SslConfig,
    pub adapter: AdapterConfig,
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    /// 0 copies the online weights into the offline stream after each
    /// accepted step; `m > 0` blends `offline = m·offline + (1−m)·online`.
    pub offline_momentum: f64,
    pub seeds: Vec<u64>,
    pub toggles: Toggles,
    /// Write an intermediate checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 160,
            eta0: 0.03,
            s_phi: 0.5,
            lambda_cv: 1.0,
            gate_reference: GateReference::Previous,
            ssl: SslConfig { prototypes: 300, ..SslConfig::default() },
            adapter: AdapterConfig::default(),
            encoder: EncoderConfig::default(),
            projector: ProjectorConfig::default(),
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            offline_momentum: 0.0,
            seeds: vec![0],
            toggles: Toggles::ALL,
            checkpoint_every: 0,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.batch_size < 2 || self.pretrain.batch_size < 2 {
            return bad("batch sizes must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.offline_momentum) {
            return bad(format!("offline_momentum must be in [0, 1), got {}", self.offline_momentum));
        }
        if !(self.pretrain.lr >= 0.0) || !self.pretrain.lr.is_finite() {
            return bad(format!("pretrain.lr must be finite and >= 0, got {}", self.pretrain.lr));
        }
        if !(self.pretrain.sinkhorn_eps > 0.0) || self.pretrain.sinkhorn_iters == 0 {
            return bad("pretrain needs sinkhorn_eps > 0 and sinkhorn_iters >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps > 0".into());
        }
        self.cvr().validate()?;
        self.ssl.validate()?;
        self.adapter.validate()?;
        self.encoder.validate()?;
        self.augment.validate()?;
        if self.projector.hidden == 0 || self.projector.out < 2 {
            return bad("projector needs hidden >= 1 and out >= 2".into());
        }
        Ok(())
    }

    pub fn cvr(&self) -> CvrConfig {
        CvrConfig { s_phi: self.s_phi, eta0: self.eta0, lambda_cv: self.lambda_cv, gate_reference: self.gate_reference }
    }

    /// Parses and validates a JSON config; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
