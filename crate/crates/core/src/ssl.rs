//! Prototype clustering objective: a fixed bank of unit prototypes,
//! equipartitioned Sinkhorn targets from the offline stream, softmax
//! assignments from the online stream, and their cross-entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init::normal;
use crate::numcore::{softmax_in_place, Tape, Tensor, Var};

/// Floor applied to online probabilities inside the log.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub prototypes: usize,
    /// Online softmax temperature.
    pub tau: f64,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
    /// Compare L2-normalized projector outputs with the prototypes.
    pub normalize: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self { prototypes: 3000, tau: 0.1, sinkhorn_eps: 0.3, sinkhorn_iters: 3, normalize: true }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes < 2 {
            return Err(Error::Validation("need at least 2 prototypes".into()));
        }
        if !(self.tau > 0.0) || !(self.sinkhorn_eps > 0.0) {
            return Err(Error::Validation("tau and sinkhorn_eps must be > 0".into()));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::Validation("sinkhorn_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// `k x dim` rows drawn uniformly on the unit sphere (normalized Gaussians).
pub fn make_prototypes<R: Rng>(k: usize, dim: usize, rng: &mut R) -> Result<Tensor> {
    if k < 2 || dim < 2 {
        return Err(Error::Validation(format!("prototype bank needs k >= 2 and dim >= 2, got {k}x{dim}")));
    }
    let mut t = normal(rng, &[k, dim], 1.0);
    for row in t.data_mut().chunks_exact_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(t)
}

/// `z · Cᵀ` with `z` optionally row-normalized first.
pub fn scores(tape: &mut Tape<'_>, z: Var, prototypes: Var, normalize: bool) -> Result<Var> {
    let z = if normalize { tape.normalize_rows(z) } else { z };
    tape.matmul_t(z, false, prototypes, true)
}

/// Online assignments `softmax(scores / tau)`, differentiable in `z`.
pub fn online_assign(tape: &mut Tape<'_>, z: Var, prototypes: Var, tau: f64, normalize: bool) -> Result<Var> {
    let s = scores(tape, z, prototypes, normalize)?;
    let s = tape.scale(s, 1.0 / tau);
    Ok(tape.softmax_rows(s))
}

/// Equipartitioned assignments from fixed scores. Columns are scaled to sum
/// `1/K`, then rows to `1/B`, `n_iters` times; rows are finally rescaled to
/// sum to 1.
pub fn sinkhorn(scores: &Tensor, eps: f64, n_iters: usize) -> Result<Tensor> {
    let [b, k] = match scores.shape() {
        [b, k] => [*b, *k],
        s => return Err(Error::Shape(format!("sinkhorn expects [B, K] scores, got {s:?}"))),
    };
    if !(eps > 0.0) || n_iters == 0 {
        return Err(Error::Contract(format!("sinkhorn needs eps > 0 and n_iters >= 1, got {eps}, {n_iters}")));
    }
    if let Some(i) = scores.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score at row {}, column {}", i / k, i % k)));
    }
    let max = scores.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = scores.data().iter().map(|s| ((s - max) / eps).exp()).collect();
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);

    let mut col = vec![0.0; k];
    for _ in 0..n_iters {
        col.iter_mut().for_each(|c| *c = 0.0);
        for row in q.chunks_exact(k) {
            col.iter_mut().zip(row).for_each(|(c, v)| *c += v);
        }
        for row in q.chunks_exact_mut(k) {
            row.iter_mut().zip(&col).for_each(|(v, c)| *v /= c * k as f64);
        }
        for row in q.chunks_exact_mut(k) {
            let r: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= r * b as f64);
        }
    }
    q.iter_mut().for_each(|v| *v *= b as f64);
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("sinkhorn underflow at eps {eps}")));
    }
    Tensor::new(&[b, k], q)
}

/// Sinkhorn targets for offline projector outputs `z` (no gradient).
pub fn offline_assign(z: &Tensor, prototypes: &Tensor, cfg: &SslConfig) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let (zv, cv) = (tape.constant(z.clone()), tape.leaf(prototypes));
    let s = scores(&mut tape, zv, cv, cfg.normalize)?;
    sinkhorn(&tape.tensor(s), cfg.sinkhorn_eps, cfg.sinkhorn_iters)
}

/// Mean over rows of `−Σ_k p_t log max(p_s, 1e-12)`; `p_t` is a constant.
pub fn cluster_ce_loss(tape: &mut Tape<'_>, p_s: Var, p_t: &Tensor) -> Result<Var> {
    if tape.shape(p_s) != p_t.shape() {
        return Err(Error::Shape(format!("p_s {:?} vs p_t {:?}", tape.shape(p_s), p_t.shape())));
    }
    let rows = p_t.rows() as f64;
    let t = tape.constant(p_t.clone());
    let logp = tape.log_floor(p_s, LOG_FLOOR);
    let prod = tape.mul(t, logp)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / rows))
}

/// Mean row entropy `−Σ p log p` (0 log 0 = 0).
pub fn mean_entropy(p: &Tensor) -> f64 {
    let h: f64 = p.data().iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum();
    h / p.rows() as f64
}

/// Plain row softmax of `scores / tau`, for comparisons outside a tape.
pub fn softmax_assign(scores: &Tensor, tau: f64) -> Tensor {
    let mut out: Vec<f64> = scores.data().iter().map(|s| s / tau).collect();
    out.chunks_exact_mut(scores.cols()).for_each(softmax_in_place);
    Tensor::new(scores.shape(), out).expect("same shape")
}
