use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use crate::adapters::{self, AdapterConfig, AdapterSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, FeatureBank};
use crate::nn::checkpoint::{self, BaseRef, CheckpointKind, Manifest};
use crate::nn::init::rng_stream;
use crate::nn::{projector, vit, Encoder, ParamStore, Projector};
use crate::ssl::make_prototypes;

pub const PROTOTYPES: &str = "ssl.prototypes";

pub(crate) const STREAM_ENCODER: u64 = 1;
pub(crate) const STREAM_PROJECTOR: u64 = 2;
pub(crate) const STREAM_PROTOTYPES: u64 = 3;
pub(crate) const STREAM_ADAPTERS: u64 = 4;

/// Encoder, projector, frozen prototype bank and optional adapters, all
/// living in one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub projector: Projector,
    pub adapters: Option<AdapterSet>,
    pub store: ParamStore,
    pub seed: u64,
    /// Where the base weights were loaded from, if they came from disk.
    pub base_path: Option<PathBuf>,
}

impl Model {
    /// Fresh base model with every encoder and projector tensor trainable.
    pub fn init_base(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(cfg.encoder.clone(), &mut store, &mut rng_stream(seed, STREAM_ENCODER))?;
        encoder.set_trainable(&mut store, true);
        let projector = Projector::new(
            cfg.projector.clone(),
            cfg.encoder.embed_dim,
            &mut store,
            &mut rng_stream(seed, STREAM_PROJECTOR),
        )?;
        let protos = make_prototypes(cfg.ssl.prototypes, cfg.projector.out, &mut rng_stream(seed, STREAM_PROTOTYPES))?;
        store.insert(PROTOTYPES, protos)?;
        Ok(Self { encoder, projector, adapters: None, store, seed, base_path: None })
    }

    /// Attaches fresh adapters, which freezes the encoder.
    pub fn attach_adapters(&mut self, config: AdapterConfig, seed: u64) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::Contract("model already has adapters".into()));
        }
        let set = AdapterSet::attach(config, &self.encoder, &mut self.store, &mut rng_stream(seed, STREAM_ADAPTERS))?;
        self.adapters = Some(set);
        Ok(())
    }

    pub fn prototypes(&self) -> &crate::numcore::Tensor {
        self.store.get(self.prototype_id())
    }

    pub fn prototype_id(&self) -> crate::nn::ParamId {
        self.store.id(PROTOTYPES).expect("prototype bank is created with the model")
    }

    /// SHA-256 of every encoder tensor.
    pub fn encoder_digest(&self) -> String {
        self.store.digest(|_, n, _| n.starts_with(vit::PREFIX))
    }

    pub fn features(&self, ds: &Dataset, tag: &str) -> Result<FeatureBank> {
        eval::extract(&self.encoder, &self.store, self.adapters.as_ref(), ds, tag)
    }

    /// Full checkpoint of encoder, projector and prototypes.
    pub fn save_base(&self, dir: &Path, step: u64) -> Result<Manifest> {
        if self.adapters.is_some() {
            return Err(Error::Contract("save_base on an adapted model; use save_adapted".into()));
        }
        let mut m = Manifest::new(CheckpointKind::Base, self.encoder.config.clone(), self.seed);
        m.projector_config = Some(self.projector.config.clone());
        m.step = step;
        checkpoint::save(dir, m, &self.store, |n| {
            n.starts_with(vit::PREFIX) || n.starts_with(projector::PREFIX) || n == PROTOTYPES
        })
    }

    /// Adapter and projector tensors plus a reference to the base checkpoint.
    pub fn save_adapted(&self, dir: &Path, step: u64) -> Result<Manifest> {
        let Some(set) = &self.adapters else {
            return Err(Error::Contract("save_adapted needs adapters".into()));
        };
        let Some(base) = &self.base_path else {
            return Err(Error::Contract("adapted checkpoint needs a base checkpoint on disk".into()));
        };
        let mut m = Manifest::new(CheckpointKind::Adapted, self.encoder.config.clone(), self.seed);
        m.adapter_config = Some(set.config.clone());
        m.projector_config = Some(self.projector.config.clone());
        m.step = step;
        m.base = Some(BaseRef { path: base.clone(), encoder_digest: self.encoder_digest() });
        checkpoint::save(dir, m, &self.store, |n| n.starts_with(adapters::PREFIX) || n.starts_with(projector::PREFIX))
    }

    /// Loads a base or adapted checkpoint. An adapted checkpoint pulls its
    /// encoder and prototypes from the referenced base and checks its digest.
    pub fn load(dir: &Path) -> Result<Self> {
        let m = checkpoint::read_manifest(dir)?;
        match m.kind {
            CheckpointKind::Base => {
                let (_, store) = checkpoint::load(dir)?;
                let encoder = Encoder::from_store(m.encoder_config.clone(), &store)?;
                let pcfg = m.projector_config.clone().ok_or_else(|| Error::Format("base lacks projector".into()))?;
                let projector = Projector::from_store(pcfg, &store)?;
                if store.id(PROTOTYPES).is_none() {
                    return Err(Error::Format(format!("{} has no prototype bank", dir.display())));
                }
                let path = std::fs::canonicalize(dir).map_err(|e| Error::io(dir, e))?;
                Ok(Self { encoder, projector, adapters: None, store, seed: m.seed, base_path: Some(path) })
            }
            CheckpointKind::Adapted => {
                let base_ref = m.base.clone().ok_or_else(|| Error::Format("adapted checkpoint lacks base".into()))?;
                let base_dir =
                    if base_ref.path.is_absolute() { base_ref.path.clone() } else { dir.join(&base_ref.path) };
                let base = Self::load(&base_dir)?;
                if base.encoder_digest() != base_ref.encoder_digest {
                    return Err(Error::Format(format!(
                        "base checkpoint {} changed since adaptation (encoder digest mismatch)",
                        base_dir.display()
                    )));
                }
                let mut store = ParamStore::new();
                for (_, name, t) in base.store.iter().filter(|(_, n, _)| !n.starts_with(projector::PREFIX)) {
                    store.insert(name, t.clone().with_requires_grad(false))?;
                }
                checkpoint::load_into(dir, &m, &mut store)?;
                let acfg =
                    m.adapter_config.clone().ok_or_else(|| Error::Format("adapted lacks adapter config".into()))?;
                let pcfg = m.projector_config.clone().ok_or_else(|| Error::Format("adapted lacks projector".into()))?;
                let encoder = Encoder::from_store(m.encoder_config.clone(), &store)?;
                let adapters = AdapterSet::from_store(acfg, &encoder, &store)?;
                let projector = Projector::from_store(pcfg, &store)?;
                Ok(Self {
                    encoder,
                    projector,
                    adapters: Some(adapters),
                    store,
                    seed: m.seed,
                    base_path: base.base_path,
                })
            }
        }
    }
}
