//! Dataset directories: `manifest.json`, `images.uptn` (f32, N×3×H×W) and
//! `labels.uptn` (f32 holding integral class ids, N).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numcore::uptn::{self, DType};
use crate::numcore::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub domain_tag: String,
    pub seed: u64,
}

pub fn save(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = ds.images.shape();
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        n: ds.len(),
        classes: ds.classes,
        height: s[2],
        width: s[3],
        domain_tag: ds.domain_tag.clone(),
        seed: ds.seed,
    };
    uptn::write(&dir.join("images.uptn"), &ds.images, DType::F32)?;
    let labels = Tensor::new(&[ds.len()], ds.labels.iter().map(|&l| l as f64).collect())?;
    uptn::write(&dir.join("labels.uptn"), &labels, DType::F32)?;
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset format_version {}", m.format_version)));
    }
    let images = uptn::read(&dir.join("images.uptn"))?;
    if images.shape() != [m.n, 3, m.height, m.width] {
        return Err(Error::Format(format!(
            "images.uptn has shape {:?}, manifest says [{}, 3, {}, {}]",
            images.shape(),
            m.n,
            m.height,
            m.width
        )));
    }
    let labels = uptn::read(&dir.join("labels.uptn"))?;
    if labels.shape() != [m.n] {
        return Err(Error::Format(format!("labels.uptn has shape {:?}, manifest says [{}]", labels.shape(), m.n)));
    }
    let labels = labels
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v < 0.0 || v.fract() != 0.0 {
                Err(Error::Validation(format!("label {i} is not a class id: {v}")))
            } else {
                Ok(v as usize)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(images, labels, m.classes, &m.domain_tag, m.seed)
}
