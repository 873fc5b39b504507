//! Checkpoint directories: one UPTN file per parameter plus `manifest.json`.
//!
//! Tensors are written as f64 so a reload reproduces the in-memory model
//! bit for bit. A save goes to a sibling temp directory that is renamed into
//! place once complete.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::projector::ProjectorConfig;
use super::vit::EncoderConfig;
use crate::adapters::AdapterConfig;
use crate::error::{Error, Result};
use crate::numcore::uptn::{self, DType};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Full encoder and projector.
    Base,
    /// Adapter and projector tensors only; the encoder comes from `base`.
    Adapted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseRef {
    pub path: PathBuf,
    /// Digest of the base encoder tensors the adapters were trained on.
    pub encoder_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub encoder_config: EncoderConfig,
    pub adapter_config: Option<AdapterConfig>,
    pub projector_config: Option<ProjectorConfig>,
    pub seed: u64,
    #[serde(default)]
    pub step: u64,
    pub base: Option<BaseRef>,
    pub params: BTreeMap<String, ParamEntry>,
}

impl Manifest {
    pub fn new(kind: CheckpointKind, encoder_config: EncoderConfig, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            encoder_config,
            adapter_config: None,
            projector_config: None,
            seed,
            step: 0,
            base: None,
            params: BTreeMap::new(),
        }
    }
}

/// Writes the parameters of `store` accepted by `select` under `dir`,
/// replacing any previous checkpoint there. `manifest.params` is filled in.
pub fn save(
    dir: &Path,
    mut manifest: Manifest,
    store: &ParamStore,
    mut select: impl FnMut(&str) -> bool,
) -> Result<Manifest> {
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let stem = dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp = parent.join(format!(".{stem}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    manifest.params.clear();
    for (i, (_, name, t)) in store.iter().filter(|(_, n, _)| select(n)).enumerate() {
        let file = format!("{i:04}.uptn");
        uptn::write(&tmp.join(&file), t, DType::F64)?;
        manifest
            .params
            .insert(name.to_string(), ParamEntry { file, shape: t.shape().to_vec(), requires_grad: t.requires_grad() });
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    let mpath = tmp.join(MANIFEST);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;

    if dir.exists() {
        let old = parent.join(format!(".{stem}.old-{}", std::process::id()));
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST);
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint format_version {}", m.format_version)));
    }
    Ok(m)
}

/// Loads a checkpoint into a fresh store, parameters in name order.
pub fn load(dir: &Path) -> Result<(Manifest, ParamStore)> {
    let m = read_manifest(dir)?;
    let mut store = ParamStore::new();
    load_into(dir, &m, &mut store)?;
    Ok((m, store))
}

/// Appends every tensor listed in `m` to `store`.
pub fn load_into(dir: &Path, m: &Manifest, store: &mut ParamStore) -> Result<()> {
    for (name, entry) in &m.params {
        let t = uptn::read(&dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!("{name}: file shape {:?} vs manifest {:?}", t.shape(), entry.shape)));
        }
        store.insert(name.clone(), t.with_requires_grad(entry.requires_grad))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init::rng_stream, Encoder};

    #[test]
    fn round_trip_is_exact_and_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let cfg =
            EncoderConfig { image_size: 8, patch_size: 4, embed_dim: 8, depth: 1, heads: 2, ..Default::default() };
        let mut store = ParamStore::new();
        Encoder::new(cfg.clone(), &mut store, &mut rng_stream(3, 0)).unwrap();
        let path = dir.path().join("ckpt");
        save(&path, Manifest::new(CheckpointKind::Base, cfg.clone(), 3), &store, |_| true).unwrap();
        save(&path, Manifest::new(CheckpointKind::Base, cfg.clone(), 3), &store, |_| true).unwrap();
        let (m, loaded) = load(&path).unwrap();
        assert_eq!(m.seed, 3);
        assert_eq!(m.encoder_config, cfg);
        assert_eq!(loaded.len(), store.len());
        for (_, name, t) in store.iter() {
            assert_eq!(loaded.get(loaded.id(name).unwrap()).data(), t.data());
        }
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(leftovers.len(), 1, "{leftovers:?}");
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Io { .. })));
    }
}
