use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Range of the crop area as a fraction of the image (square crops).
    pub crop_scale: [f64; 2],
    pub flip_prob: f64,
    /// Brightness offset and contrast factor are drawn from `±jitter`.
    pub jitter: f64,
    /// Independent per-channel offsets drawn from `±channel_jitter`.
    pub channel_jitter: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { crop_scale: [0.6, 1.0], flip_prob: 0.5, jitter: 0.2, channel_jitter: 0.1, noise_std: 0.02 }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self { crop_scale: [1.0, 1.0], flip_prob: 0.0, jitter: 0.0, channel_jitter: 0.0, noise_std: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Validation(format!("crop_scale must satisfy 0 < lo <= hi <= 1, got {lo}, {hi}")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob)
            || !(self.jitter >= 0.0)
            || !(self.channel_jitter >= 0.0)
            || !(self.noise_std >= 0.0)
        {
            return Err(Error::Validation("flip_prob in [0,1], jitter terms and noise_std >= 0".into()));
        }
        Ok(())
    }
}

/// One random view of a `[C, S, S]` image written into `out`.
fn augment_one<R: Rng>(img: &[f64], c: usize, s: usize, cfg: &AugmentConfig, rng: &mut R, out: &mut [f64]) {
    let [lo, hi] = cfg.crop_scale;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let side = scale.sqrt() * s as f64;
    let (ox, oy) = if side < s as f64 {
        (rng.random_range(0.0..=(s as f64 - side)), rng.random_range(0.0..=(s as f64 - side)))
    } else {
        (0.0, 0.0)
    };
    let flip = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;
    let plane = s * s;

    if side >= s as f64 {
        out.copy_from_slice(img);
    } else {
        // bilinear resample of the crop window back to S x S
        let step = side / s as f64;
        for ch in 0..c {
            let src = &img[ch * plane..(ch + 1) * plane];
            for y in 0..s {
                let sy = (oy + (y as f64 + 0.5) * step - 0.5).clamp(0.0, (s - 1) as f64);
                let (y0, wy) = (sy.floor() as usize, sy - sy.floor());
                let y1 = (y0 + 1).min(s - 1);
                for x in 0..s {
                    let sx = (ox + (x as f64 + 0.5) * step - 0.5).clamp(0.0, (s - 1) as f64);
                    let (x0, wx) = (sx.floor() as usize, sx - sx.floor());
                    let x1 = (x0 + 1).min(s - 1);
                    let top = src[y0 * s + x0] * (1.0 - wx) + src[y0 * s + x1] * wx;
                    let bot = src[y1 * s + x0] * (1.0 - wx) + src[y1 * s + x1] * wx;
                    out[ch * plane + y * s + x] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
    }
    if flip {
        for row in out.chunks_exact_mut(s) {
            row.reverse();
        }
    }
    if cfg.jitter > 0.0 {
        let b = rng.random_range(-cfg.jitter..=cfg.jitter);
        let k = 1.0 + rng.random_range(-cfg.jitter..=cfg.jitter);
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        out.iter_mut().for_each(|v| *v = (*v - mean) * k + mean + b);
    }
    if cfg.channel_jitter > 0.0 {
        for ch in out.chunks_exact_mut(plane) {
            let o = rng.random_range(-cfg.channel_jitter..=cfg.channel_jitter);
            ch.iter_mut().for_each(|v| *v += o);
        }
    }
    if cfg.noise_std > 0.0 {
        out.iter_mut().for_each(|v| *v += rng.sample::<f64, _>(StandardNormal) * cfg.noise_std);
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Applies an independent random view to every image of a `[B, C, S, S]` batch.
pub fn augment<R: Rng>(batch: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    let shape = batch.shape();
    if shape.len() != 4 || shape[2] != shape[3] {
        return Err(Error::Shape(format!("expected [B, C, S, S] images, got {shape:?}")));
    }
    let (c, s) = (shape[1], shape[2]);
    let per = c * s * s;
    let mut out = vec![0.0; batch.numel()];
    for (src, dst) in batch.data().chunks_exact(per).zip(out.chunks_exact_mut(per)) {
        augment_one(src, c, s, cfg, rng, dst);
    }
    Tensor::new(shape, out)
}

/// Two independent views `(x_s, x_t)` of every image in the batch.
pub fn two_views<R: Rng>(batch: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<(Tensor, Tensor)> {
    if batch.shape().first().is_none_or(|&b| b == 0) {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok((augment(batch, cfg, rng)?, augment(batch, cfg, rng)?))
}
