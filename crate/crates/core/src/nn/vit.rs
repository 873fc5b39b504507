//! Micro vision transformer: patch embedding, pre-norm blocks of multi-head
//! self-attention and GELU MLP, CLS-token readout after a final layer norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::{trunc_normal, INIT_STD};
use super::params::{Graph, ParamId, ParamStore};
use crate::adapters::{self, AdapterSet, Site};
use crate::error::{Error, Result};
use crate::numcore::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Cls,
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// One `3d x d` QKV matrix per block; `false` keeps Q, K, V separate.
    pub fused_qkv: bool,
    pub readout: Readout,
    pub ln_eps: f64,
    /// Pixels enter the patch embedding as `(x - pixel_mean) / pixel_std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            fused_qkv: true,
            readout: Readout::Cls,
            ln_eps: 1e-6,
            pixel_mean: 0.5,
            pixel_std: 0.25,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.embed_dim == 0 || self.heads == 0 || self.depth == 0 || self.patch_size == 0 || self.channels == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if !(self.pixel_std > 0.0) || !self.pixel_mean.is_finite() {
            return bad(format!("pixel_std must be > 0, got {}", self.pixel_std));
        }
        if self.mlp_ratio == 0 || !(self.ln_eps > 0.0) {
            return bad("mlp_ratio and ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn create<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_out: usize, d_in: usize) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), trunc_normal(rng, &[d_out, d_in], INIT_STD))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self { weight, bias })
    }

    fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self { weight: find(store, &format!("{name}.weight"))?, bias: find(store, &format!("{name}.bias"))? })
    }

    /// `x · Wᵀ + b`, plus the adapter delta when one is given.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, delta: Option<&adapters::Delta>) -> Result<Var> {
        let w = g.param(self.weight);
        let mut y = g.tape.matmul_t(x, false, w, true)?;
        if let Some(d) = delta {
            let dy = adapters::delta_forward(g, d, x)?;
            y = g.tape.add(y, dy)?;
        }
        let b = g.param(self.bias);
        g.tape.add_tiled(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    fn create(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), Tensor::full(&[d], 1.0))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[d]))?;
        Ok(Self { gain, bias })
    }

    fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self { gain: find(store, &format!("{name}.gain"))?, bias: find(store, &format!("{name}.bias"))? })
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, eps: f64) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.tape.layer_norm(x, gain, bias, eps)
    }
}

#[derive(Clone, Debug)]
pub enum Qkv {
    Fused(Linear),
    Split { q: Linear, k: Linear, v: Linear },
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Qkv,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

fn find(store: &ParamStore, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::Format(format!("missing parameter {name}")))
}

pub const PREFIX: &str = "encoder.";

impl Encoder {
    /// Registers freshly initialized encoder parameters in `store`.
    pub fn new<R: Rng>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let patch_embed = Linear::create(store, rng, "encoder.patch_embed", d, config.patch_dim())?;
        let cls = store.insert("encoder.cls", trunc_normal(rng, &[d], INIT_STD))?;
        let pos = store.insert("encoder.pos", trunc_normal(rng, &[config.tokens(), d], INIT_STD))?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("encoder.blocks.{i}");
            let ln1 = LayerNorm::create(store, &format!("{p}.ln1"), d)?;
            let qkv = if config.fused_qkv {
                Qkv::Fused(Linear::create(store, rng, &format!("{p}.qkv"), 3 * d, d)?)
            } else {
                Qkv::Split {
                    q: Linear::create(store, rng, &format!("{p}.q"), d, d)?,
                    k: Linear::create(store, rng, &format!("{p}.k"), d, d)?,
                    v: Linear::create(store, rng, &format!("{p}.v"), d, d)?,
                }
            };
            let proj = Linear::create(store, rng, &format!("{p}.proj"), d, d)?;
            let ln2 = LayerNorm::create(store, &format!("{p}.ln2"), d)?;
            let mlp_in = Linear::create(store, rng, &format!("{p}.mlp_in"), config.mlp_dim(), d)?;
            let mlp_out = Linear::create(store, rng, &format!("{p}.mlp_out"), d, config.mlp_dim())?;
            blocks.push(Block { ln1, qkv, proj, ln2, mlp_in, mlp_out });
        }
        let norm = LayerNorm::create(store, "encoder.norm", d)?;
        Ok(Self { config, patch_embed, cls, pos, blocks, norm })
    }

    /// Re-binds an encoder to parameters already present in `store`.
    pub fn from_store(config: EncoderConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("encoder.blocks.{i}");
                let qkv = if config.fused_qkv {
                    Qkv::Fused(Linear::lookup(store, &format!("{p}.qkv"))?)
                } else {
                    Qkv::Split {
                        q: Linear::lookup(store, &format!("{p}.q"))?,
                        k: Linear::lookup(store, &format!("{p}.k"))?,
                        v: Linear::lookup(store, &format!("{p}.v"))?,
                    }
                };
                Ok(Block {
                    ln1: LayerNorm::lookup(store, &format!("{p}.ln1"))?,
                    qkv,
                    proj: Linear::lookup(store, &format!("{p}.proj"))?,
                    ln2: LayerNorm::lookup(store, &format!("{p}.ln2"))?,
                    mlp_in: Linear::lookup(store, &format!("{p}.mlp_in"))?,
                    mlp_out: Linear::lookup(store, &format!("{p}.mlp_out"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed: Linear::lookup(store, "encoder.patch_embed")?,
            cls: find(store, "encoder.cls")?,
            pos: find(store, "encoder.pos")?,
            norm: LayerNorm::lookup(store, "encoder.norm")?,
            blocks,
            config,
        })
    }

    /// `(weight id, shape [d_out, d_in])` of a block matrix that adapters may target.
    pub fn site_weight(&self, store: &ParamStore, layer: usize, site: Site) -> Option<(ParamId, [usize; 2])> {
        let b = self.blocks.get(layer)?;
        let lin = match (site, &b.qkv) {
            (Site::Qkv, Qkv::Fused(l)) => l,
            (Site::Q, Qkv::Split { q, .. }) => q,
            (Site::K, Qkv::Split { k, .. }) => k,
            (Site::V, Qkv::Split { v, .. }) => v,
            (Site::Proj, _) => &b.proj,
            (Site::MlpIn, _) => &b.mlp_in,
            (Site::MlpOut, _) => &b.mlp_out,
            _ => return None,
        };
        let s = store.get(lin.weight).shape();
        Some((lin.weight, [s[0], s[1]]))
    }

    pub fn qkv_sites(&self) -> &'static [Site] {
        if self.config.fused_qkv {
            &[Site::Qkv]
        } else {
            &[Site::Q, Site::K, Site::V]
        }
    }

    /// Sets `requires_grad` on every encoder parameter.
    pub fn set_trainable(&self, store: &mut ParamStore, flag: bool) {
        let ids: Vec<ParamId> = store.iter().filter(|(_, n, _)| n.starts_with(PREFIX)).map(|(id, _, _)| id).collect();
        ids.into_iter().for_each(|id| store.set_trainable(id, flag));
    }

    pub fn forward(&self, g: &mut Graph<'_>, adapters: Option<&AdapterSet>, images: &Tensor) -> Result<Var> {
        self.forward_traced(g, adapters, images, None)
    }

    /// Forward pass; when `trace` is given, pushes each block's attention
    /// probabilities (`[batch*heads, tokens, tokens]`).
    pub fn forward_traced(
        &self,
        g: &mut Graph<'_>,
        adapters: Option<&AdapterSet>,
        images: &Tensor,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let patches = patchify(images, cfg)?;
        let batch = images.shape()[0];
        let (t, d, h) = (cfg.tokens(), cfg.embed_dim, cfg.heads);
        let delta = |layer: usize, site: Site| adapters.and_then(|a| a.delta(layer, site));

        let x = g.tape.constant(patches);
        let x = self.patch_embed.forward(g, x, None)?;
        let cls = g.param(self.cls);
        let x = g.tape.prepend_row(x, cls, batch)?;
        let pos = g.param(self.pos);
        let mut x = g.tape.add_tiled(x, pos)?;

        let scale = 1.0 / ((d / h) as f64).sqrt();
        for (li, blk) in self.blocks.iter().enumerate() {
            let hdn = blk.ln1.forward(g, x, cfg.ln_eps)?;
            let (q, k, v) = match &blk.qkv {
                Qkv::Fused(lin) => {
                    let qkv = lin.forward(g, hdn, delta(li, Site::Qkv))?;
                    (
                        g.tape.split_heads(qkv, batch, t, h, 0, 3)?,
                        g.tape.split_heads(qkv, batch, t, h, 1, 3)?,
                        g.tape.split_heads(qkv, batch, t, h, 2, 3)?,
                    )
                }
                Qkv::Split { q, k, v } => {
                    let mut heads = |lin: &Linear, site: Site| -> Result<Var> {
                        let y = lin.forward(g, hdn, delta(li, site))?;
                        g.tape.split_heads(y, batch, t, h, 0, 1)
                    };
                    (heads(q, Site::Q)?, heads(k, Site::K)?, heads(v, Site::V)?)
                }
            };
            let scores = g.tape.batch_matmul(q, k, true)?;
            let scores = g.tape.scale(scores, scale);
            let attn = g.tape.softmax_rows(scores);
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(attn);
            }
            let ctx = g.tape.batch_matmul(attn, v, false)?;
            let ctx = g.tape.merge_heads(ctx, batch, h)?;
            let out = blk.proj.forward(g, ctx, delta(li, Site::Proj))?;
            x = g.tape.add(x, out)?;

            let hdn = blk.ln2.forward(g, x, cfg.ln_eps)?;
            let hdn = blk.mlp_in.forward(g, hdn, delta(li, Site::MlpIn))?;
            let hdn = g.tape.gelu(hdn);
            let out = blk.mlp_out.forward(g, hdn, delta(li, Site::MlpOut))?;
            x = g.tape.add(x, out)?;
        }
        let x = self.norm.forward(g, x, cfg.ln_eps)?;
        match cfg.readout {
            Readout::Cls => {
                let rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
                g.tape.select_rows(x, &rows)
            }
            Readout::MeanPool => {
                let rows: Vec<usize> = (0..batch).flat_map(|b| (1..t).map(move |i| b * t + i)).collect();
                let p = g.tape.select_rows(x, &rows)?;
                let p = g.tape.reshape(p, &[batch, t - 1, d])?;
                g.tape.mean_axis(p, 1)
            }
        }
    }
}

/// `[B, C, H, W]` images to `[B * patches, C * p * p]` normalized rows,
/// patches in row-major grid order, each row laid out channel-major.
pub fn patchify(images: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::Shape(format!(
            "expected images [B, {}, {}, {}], got {s:?}",
            cfg.channels, cfg.image_size, cfg.image_size
        )));
    }
    let (b, c, hw, p) = (s[0], s[1], s[2], cfg.patch_size);
    if hw % p != 0 {
        return Err(Error::Shape(format!("image size {hw} not divisible by patch size {p}")));
    }
    let grid = hw / p;
    let src = images.data();
    let inv_std = 1.0 / cfg.pixel_std;
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for ci in 0..c {
                    for dy in 0..p {
                        let row = ((bi * c + ci) * hw + gy * p + dy) * hw + gx * p;
                        out.extend(src[row..row + p].iter().map(|v| (v - cfg.pixel_mean) * inv_std));
                    }
                }
            }
        }
    }
    Tensor::new(&[b * grid * grid, c * p * p], out)
}
