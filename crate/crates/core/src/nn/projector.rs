use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::{trunc_normal, INIT_STD};
use super::params::{Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::numcore::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub hidden: usize,
    pub out: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self { hidden: 2048, out: 128 }
    }
}

/// Two-layer MLP head `d -> hidden -> out` with ReLU in between.
/// Its parameters are always trainable.
#[derive(Clone, Debug)]
pub struct Projector {
    pub config: ProjectorConfig,
    pub in_dim: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub const PREFIX: &str = "projector.";

impl Projector {
    pub fn new<R: Rng>(config: ProjectorConfig, in_dim: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if config.hidden == 0 || config.out == 0 || in_dim == 0 {
            return Err(Error::Validation("projector dimensions must be positive".into()));
        }
        let mut add = |name: &str, t: Tensor| store.insert(name, t.with_requires_grad(true));
        let w1 = add("projector.w1", trunc_normal(rng, &[config.hidden, in_dim], INIT_STD))?;
        let b1 = add("projector.b1", Tensor::zeros(&[config.hidden]))?;
        let w2 = add("projector.w2", trunc_normal(rng, &[config.out, config.hidden], INIT_STD))?;
        let b2 = add("projector.b2", Tensor::zeros(&[config.out]))?;
        Ok(Self { config, in_dim, w1, b1, w2, b2 })
    }

    pub fn from_store(config: ProjectorConfig, store: &ParamStore) -> Result<Self> {
        let find = |n: &str| store.id(n).ok_or_else(|| Error::Format(format!("missing parameter {n}")));
        let w1 = find("projector.w1")?;
        let in_dim = store.get(w1).shape()[1];
        Ok(Self { in_dim, w1, b1: find("projector.b1")?, w2: find("projector.w2")?, b2: find("projector.b2")?, config })
    }

    pub fn param_count(&self) -> usize {
        let c = &self.config;
        c.hidden * self.in_dim + c.hidden + c.out * c.hidden + c.out
    }

    pub fn forward(&self, g: &mut Graph<'_>, feats: Var) -> Result<Var> {
        let width = *g.tape.shape(feats).last().unwrap_or(&0);
        if g.tape.shape(feats).len() != 2 || width != self.in_dim {
            return Err(Error::Shape(format!(
                "projector expects [B, {}] features, got {:?}",
                self.in_dim,
                g.tape.shape(feats)
            )));
        }
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.tape.matmul_t(feats, false, w1, true)?;
        let h = g.tape.add_tiled(h, b1)?;
        let h = g.tape.relu(h);
        let z = g.tape.matmul_t(h, false, w2, true)?;
        g.tape.add_tiled(z, b2)
    }
}
