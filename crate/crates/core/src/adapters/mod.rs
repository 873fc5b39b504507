//! Low-rank adapters on frozen encoder matrices.
//!
//! LoRA adds `alpha · B·A` per target matrix with both factors trainable.
//! VeRA freezes one random `(A, B)` pair per target shape, shared by every
//! layer, and trains the per-layer scaling vectors in
//! `diag(b_vec) · B · diag(d_vec) · A`.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init, Encoder, Graph, ParamId, ParamStore, Projector};
use crate::numcore::{gemm, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Qkv,
    Q,
    K,
    V,
    Proj,
    MlpIn,
    MlpOut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Lora,
    Vera,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetPolicy {
    #[serde(rename = "QKV")]
    Qkv,
    #[serde(rename = "QKV+PROJ")]
    QkvProj,
    #[serde(rename = "QKV+PROJ+MLP")]
    QkvProjMlp,
}

impl TargetPolicy {
    pub fn includes(self, site: Site) -> bool {
        match site {
            Site::Qkv | Site::Q | Site::K | Site::V => true,
            Site::Proj => self != TargetPolicy::Qkv,
            Site::MlpIn | Site::MlpOut => self == TargetPolicy::QkvProjMlp,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TargetPolicy::Qkv => "QKV",
            TargetPolicy::QkvProj => "QKV+PROJ",
            TargetPolicy::QkvProjMlp => "QKV+PROJ+MLP",
        }
    }
}

impl std::str::FromStr for TargetPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "QKV" => Ok(Self::Qkv),
            "QKV+PROJ" => Ok(Self::QkvProj),
            "QKV+PROJ+MLP" => Ok(Self::QkvProjMlp),
            other => Err(Error::Validation(format!("unknown target policy {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub variant: Variant,
    pub rank: usize,
    pub alpha: f64,
    pub policy: TargetPolicy,
    /// Initial value of every VeRA `d_vec` entry.
    pub vera_d_init: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { variant: Variant::Lora, rank: 16, alpha: 1.0, policy: TargetPolicy::QkvProj, vera_d_init: 0.1 }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Validation("adapter rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Validation(format!("adapter alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraDelta {
    /// `rank x d_in`
    pub a: ParamId,
    /// `d_out x rank`
    pub b: ParamId,
    pub alpha: f64,
    pub rank: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VeraDelta {
    /// Shared, frozen `rank x d_in`.
    pub a: ParamId,
    /// Shared, frozen `d_out x rank`.
    pub b: ParamId,
    /// Trainable, length `rank`.
    pub d_vec: ParamId,
    /// Trainable, length `d_out`.
    pub b_vec: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Delta {
    Lora(LoraDelta),
    Vera(VeraDelta),
}

impl Delta {
    /// Parameters that are trained and stored with the adapter.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        match self {
            Delta::Lora(l) => vec![l.a, l.b],
            Delta::Vera(v) => vec![v.d_vec, v.b_vec],
        }
    }
}

/// Adapted matrices of one encoder, keyed by `(layer, site)`.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub config: AdapterConfig,
    deltas: BTreeMap<(usize, Site), Delta>,
}

pub const PREFIX: &str = "adapter.";

impl AdapterSet {
    /// Creates adapter parameters in `store` for every matrix the policy
    /// names and freezes all encoder parameters.
    pub fn attach<R: Rng>(
        config: AdapterConfig,
        encoder: &Encoder,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        encoder.set_trainable(store, false);
        let r = config.rank;
        let mut deltas = BTreeMap::new();
        let mut shared: HashMap<[usize; 2], (ParamId, ParamId)> = HashMap::new();
        for layer in 0..encoder.config.depth {
            for site in Self::candidate_sites(encoder) {
                if !config.policy.includes(site) {
                    continue;
                }
                let Some((_, [d_out, d_in])) = encoder.site_weight(store, layer, site) else { continue };
                let name = format!("adapter.blocks.{layer}.{}", site_name(site));
                let delta = match config.variant {
                    Variant::Lora => {
                        let a = init::normal(rng, &[r, d_in], 1.0 / r as f64).with_requires_grad(true);
                        let a = store.insert(format!("{name}.lora_a"), a)?;
                        let b = store
                            .insert(format!("{name}.lora_b"), Tensor::zeros(&[d_out, r]).with_requires_grad(true))?;
                        Delta::Lora(LoraDelta { a, b, alpha: config.alpha, rank: r })
                    }
                    Variant::Vera => {
                        let (a, b) = match shared.get(&[d_out, d_in]) {
                            Some(&pair) => pair,
                            None => {
                                let std = 1.0 / (d_in as f64).sqrt();
                                let base = format!("adapter.vera_shared.{d_out}x{d_in}");
                                let a = store.insert(format!("{base}.a"), init::normal(rng, &[r, d_in], std))?;
                                let b = store.insert(format!("{base}.b"), init::normal(rng, &[d_out, r], std))?;
                                shared.insert([d_out, d_in], (a, b));
                                (a, b)
                            }
                        };
                        let d_vec = Tensor::full(&[r], config.vera_d_init).with_requires_grad(true);
                        let d_vec = store.insert(format!("{name}.vera_d"), d_vec)?;
                        let b_vec =
                            store.insert(format!("{name}.vera_b"), Tensor::zeros(&[d_out]).with_requires_grad(true))?;
                        Delta::Vera(VeraDelta { a, b, d_vec, b_vec })
                    }
                };
                deltas.insert((layer, site), delta);
            }
        }
        Ok(Self { config, deltas })
    }

    /// Re-binds an adapter set to parameters already in `store` (checkpoint load).
    pub fn from_store(config: AdapterConfig, encoder: &Encoder, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let find = |n: &str| store.id(n).ok_or_else(|| Error::Format(format!("missing adapter parameter {n}")));
        let mut deltas = BTreeMap::new();
        for layer in 0..encoder.config.depth {
            for site in Self::candidate_sites(encoder) {
                if !config.policy.includes(site) {
                    continue;
                }
                let Some((_, [d_out, d_in])) = encoder.site_weight(store, layer, site) else { continue };
                let name = format!("adapter.blocks.{layer}.{}", site_name(site));
                let delta = match config.variant {
                    Variant::Lora => Delta::Lora(LoraDelta {
                        a: find(&format!("{name}.lora_a"))?,
                        b: find(&format!("{name}.lora_b"))?,
                        alpha: config.alpha,
                        rank: config.rank,
                    }),
                    Variant::Vera => {
                        let base = format!("adapter.vera_shared.{d_out}x{d_in}");
                        Delta::Vera(VeraDelta {
                            a: find(&format!("{base}.a"))?,
                            b: find(&format!("{base}.b"))?,
                            d_vec: find(&format!("{name}.vera_d"))?,
                            b_vec: find(&format!("{name}.vera_b"))?,
                        })
                    }
                };
                deltas.insert((layer, site), delta);
            }
        }
        Ok(Self { config, deltas })
    }

    fn candidate_sites(encoder: &Encoder) -> Vec<Site> {
        let mut sites = encoder.qkv_sites().to_vec();
        sites.extend([Site::Proj, Site::MlpIn, Site::MlpOut]);
        sites
    }

    pub fn delta(&self, layer: usize, site: Site) -> Option<&Delta> {
        self.deltas.get(&(layer, site))
    }

    pub fn targets(&self) -> impl Iterator<Item = (usize, Site)> + '_ {
        self.deltas.keys().copied()
    }

    pub fn deltas(&self) -> impl Iterator<Item = ((usize, Site), &Delta)> {
        self.deltas.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Number of trained (and stored) adapter values.
    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        self.deltas.values().flat_map(Delta::trainable_params).map(|id| store.get(id).numel()).sum()
    }

    /// Folds every delta into its base matrix. The returned store holds the
    /// merged encoder (adapter tensors removed) and any non-adapter params.
    pub fn merged_store(&self, encoder: &Encoder, store: &ParamStore) -> Result<ParamStore> {
        let mut merged_weights: HashMap<ParamId, Tensor> = HashMap::new();
        for (&(layer, site), delta) in &self.deltas {
            let (wid, _) = encoder
                .site_weight(store, layer, site)
                .ok_or_else(|| Error::Contract(format!("no matrix at layer {layer} site {site:?}")))?;
            merged_weights.insert(wid, merge(store, store.get(wid), delta)?);
        }
        let mut out = ParamStore::new();
        for (id, name, t) in store.iter() {
            if name.starts_with(PREFIX) {
                continue;
            }
            let t = merged_weights
                .remove(&id)
                .map(|m| m.with_requires_grad(t.requires_grad()))
                .unwrap_or_else(|| t.clone());
            out.insert(name, t)?;
        }
        Ok(out)
    }
}

pub fn site_name(site: Site) -> &'static str {
    match site {
        Site::Qkv => "qkv",
        Site::Q => "q",
        Site::K => "k",
        Site::V => "v",
        Site::Proj => "proj",
        Site::MlpIn => "mlp_in",
        Site::MlpOut => "mlp_out",
    }
}

/// The low-rank term alone for row inputs `x` (`[N, d_in]` -> `[N, d_out]`).
pub fn delta_forward(g: &mut Graph<'_>, delta: &Delta, x: Var) -> Result<Var> {
    match *delta {
        Delta::Lora(LoraDelta { a, b, alpha, .. }) => {
            let (a, b) = (g.param(a), g.param(b));
            let h = g.tape.matmul_t(x, false, a, true)?;
            let y = g.tape.matmul_t(h, false, b, true)?;
            Ok(if alpha == 1.0 { y } else { g.tape.scale(y, alpha) })
        }
        Delta::Vera(VeraDelta { a, b, d_vec, b_vec }) => {
            let (a, b, dv, bv) = (g.param(a), g.param(b), g.param(d_vec), g.param(b_vec));
            let h = g.tape.matmul_t(x, false, a, true)?;
            let h = g.tape.mul_tiled(h, dv)?;
            let y = g.tape.matmul_t(h, false, b, true)?;
            g.tape.mul_tiled(y, bv)
        }
    }
}

/// `x · W0ᵀ + delta(x)` for row inputs `x`.
pub fn adapted_matvec(g: &mut Graph<'_>, w0: ParamId, delta: &Delta, x: Var) -> Result<Var> {
    let (d_out, d_in) = match g.store().get(w0).shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::Shape(format!("base matrix must be 2-d, got {s:?}"))),
    };
    let width = *g.tape.shape(x).last().unwrap_or(&0);
    if width != d_in {
        return Err(Error::Shape(format!("input width {width} vs base matrix [{d_out}, {d_in}]")));
    }
    check_delta_shape(g.store(), delta, d_out, d_in)?;
    let w = g.param(w0);
    let base = g.tape.matmul_t(x, false, w, true)?;
    let dy = delta_forward(g, delta, x)?;
    g.tape.add(base, dy)
}

fn check_delta_shape(store: &ParamStore, delta: &Delta, d_out: usize, d_in: usize) -> Result<()> {
    let (a, b) = match delta {
        Delta::Lora(l) => (l.a, l.b),
        Delta::Vera(v) => (v.a, v.b),
    };
    let (sa, sb) = (store.get(a).shape(), store.get(b).shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != d_in || sb[0] != d_out || sa[0] != sb[1] {
        return Err(Error::Shape(format!("delta factors {sa:?}, {sb:?} do not fit a [{d_out}, {d_in}] matrix")));
    }
    Ok(())
}

/// `W0 + alpha·B·A` (LoRA) or `W0 + diag(b_vec)·B·diag(d_vec)·A` (VeRA).
pub fn merge(store: &ParamStore, w0: &Tensor, delta: &Delta) -> Result<Tensor> {
    let (d_out, d_in) = match w0.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::Shape(format!("base matrix must be 2-d, got {s:?}"))),
    };
    check_delta_shape(store, delta, d_out, d_in)?;
    let mut out = w0.data().to_vec();
    match *delta {
        Delta::Lora(LoraDelta { a, b, alpha, .. }) => {
            let (a, b) = (store.get(a), store.get(b));
            let r = a.shape()[0];
            let mut ba = vec![0.0; d_out * d_in];
            gemm(d_out, r, d_in, b.data(), false, a.data(), false, 0.0, &mut ba);
            out.iter_mut().zip(&ba).for_each(|(w, d)| *w += alpha * d);
        }
        Delta::Vera(VeraDelta { a, b, d_vec, b_vec }) => {
            let (a, b, dv, bv) = (store.get(a), store.get(b), store.get(d_vec).data(), store.get(b_vec).data());
            let r = a.shape()[0];
            // scaled_a = diag(d_vec) · A
            let mut scaled_a = a.data().to_vec();
            for (i, row) in scaled_a.chunks_exact_mut(d_in).enumerate() {
                row.iter_mut().for_each(|v| *v *= dv[i]);
            }
            let mut ba = vec![0.0; d_out * d_in];
            gemm(d_out, r, d_in, b.data(), false, &scaled_a, false, 0.0, &mut ba);
            for (o, row) in ba.chunks_exact(d_in).enumerate() {
                for (j, d) in row.iter().enumerate() {
                    out[o * d_in + j] += bv[o] * d;
                }
            }
        }
    }
    Tensor::new(&[d_out, d_in], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub trainable: usize,
    pub frozen: usize,
    pub fraction: f64,
    pub stored: usize,
    pub adapter: usize,
    pub policy: Option<TargetPolicy>,
    pub rank: Option<usize>,
    pub variant: Option<Variant>,
}

/// Counts encoder, adapter and (optionally) projector parameters by their
/// `requires_grad` flags. `stored` is what a checkpoint of the adaptation
/// must keep: trained adapter values plus the projector when given.
pub fn param_report(store: &ParamStore, adapters: Option<&AdapterSet>, projector: Option<&Projector>) -> ParamReport {
    let counted = |name: &str| {
        name.starts_with(crate::nn::vit::PREFIX)
            || (adapters.is_some() && name.starts_with(PREFIX))
            || (projector.is_some() && name.starts_with(crate::nn::projector::PREFIX))
    };
    let trainable = store.count(|n, t| counted(n) && t.requires_grad());
    let frozen = store.count(|n, t| counted(n) && !t.requires_grad());
    let adapter = adapters.map_or(0, |a| a.trainable_count(store));
    let proj = projector.map_or(0, |_| store.count(|n, _| n.starts_with(crate::nn::projector::PREFIX)));
    let total = trainable + frozen;
    ParamReport {
        trainable,
        frozen,
        fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        stored: adapter + proj,
        adapter,
        policy: adapters.map(|a| a.config.policy),
        rank: adapters.map(|a| a.config.rank),
        variant: adapters.map(|a| a.config.variant),
    }
}
