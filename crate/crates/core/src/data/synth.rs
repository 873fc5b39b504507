//! Synthetic stripe-texture domains.
//!
//! Class `c` is a Gabor-like grating whose orientation and spatial frequency
//! depend on `c`, drawn over a flat background. The target domain applies one
//! global shift to every class: the stripe hue is rotated, the background
//! color is swapped, and all frequencies are scaled.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::init::rng_stream;
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub domain: Domain,
    pub seed: u64,
    pub image_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { classes: 10, per_class: 500, domain: Domain::Source, seed: 0, image_size: 32 }
    }
}

/// Appearance of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub stripe: [f64; 3],
    pub background: [f64; 3],
    pub freq_scale: f64,
}

/// Rotates an RGB color about the grey axis by `deg` degrees.
pub fn rotate_hue(rgb: [f64; 3], deg: f64) -> [f64; 3] {
    let (s, c) = (deg.to_radians().sin(), deg.to_radians().cos());
    let k = (1.0 - c) / 3.0;
    let r = 3f64.sqrt().recip() * s;
    let m = [[c + k, k - r, k + r], [k + r, c + k, k - r], [k - r, k + r, c + k]];
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(m) {
        *o = (row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2]).clamp(0.0, 1.0);
    }
    out
}

const SOURCE_STRIPE: [f64; 3] = [0.92, 0.55, 0.18];
const SOURCE_BACKGROUND: [f64; 3] = [0.22, 0.30, 0.48];
pub const TARGET_HUE_DEG: f64 = 150.0;
pub const TARGET_FREQ_SCALE: f64 = 1.6;

impl DomainStyle {
    pub fn of(domain: Domain) -> Self {
        match domain {
            Domain::Source => Self { stripe: SOURCE_STRIPE, background: SOURCE_BACKGROUND, freq_scale: 1.0 },
            Domain::Target => Self {
                stripe: rotate_hue(SOURCE_STRIPE, TARGET_HUE_DEG),
                background: [0.62, 0.58, 0.52],
                freq_scale: TARGET_FREQ_SCALE,
            },
        }
    }
}

/// Orientation (radians) and frequency (cycles per image) of class `c`.
///
/// Classes are split over two frequency levels; orientations are spread over
/// `[0, π/2]` so that a horizontal flip (θ -> π − θ) never maps one class
/// onto another.
pub fn class_params(c: usize, classes: usize) -> (f64, f64) {
    let n_orient = classes.div_ceil(2);
    let o = c % n_orient;
    let level = c / n_orient;
    let theta = if n_orient == 1 { 0.0 } else { 0.5 * PI * o as f64 / (n_orient - 1) as f64 };
    let freq = [2.5, 5.0][level.min(1)];
    (theta, freq)
}

/// Renders one image `[3, size, size]` (channel-major) into `out`.
fn render<R: Rng>(rng: &mut R, c: usize, classes: usize, size: usize, style: &DomainStyle, out: &mut [f64]) {
    let (theta, freq) = class_params(c, classes);
    let theta = theta + rng.random_range(-0.06..0.06);
    let freq = freq * style.freq_scale * rng.random_range(0.94..1.06);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.65..1.0);
    let s = size as f64;
    let (cx, cy) = (s / 2.0 + rng.random_range(-0.12..0.12) * s, s / 2.0 + rng.random_range(-0.12..0.12) * s);
    let sigma = s * rng.random_range(0.28..0.38);
    let bg: Vec<f64> = style.background.iter().map(|b| b + rng.random_range(-0.05..0.05)).collect();
    let (ct, st) = (theta.cos(), theta.sin());
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let u = (fx * ct + fy * st) / s;
            let wave = 0.5 + 0.5 * (2.0 * PI * freq * u + phase).sin();
            let r2 = (fx - cx).powi(2) + (fy - cy).powi(2);
            let env = (-r2 / (2.0 * sigma * sigma)).exp();
            let m = amp * env * wave;
            for ch in 0..3 {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.03;
                let v = bg[ch] + m * (style.stripe[ch] - bg[ch]) + noise;
                // stored on disk as f32; keep the in-memory copy identical
                out[ch * plane + y * size + x] = v.clamp(0.0, 1.0) as f32 as f64;
            }
        }
    }
}

/// Generates `classes x per_class` images, ordered class-major then shuffled
/// deterministically by `seed`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Validation(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.per_class == 0 || spec.image_size < 4 {
        return Err(Error::Validation("per_class must be >= 1 and image_size >= 4".into()));
    }
    let style = DomainStyle::of(spec.domain);
    let n = spec.classes * spec.per_class;
    let size = spec.image_size;
    let per_image = 3 * size * size;
    let mut labels: Vec<usize> = (0..n).map(|i| i / spec.per_class).collect();
    // the same seed gives the same label order in both domains
    let mut order_rng = rng_stream(spec.seed, 0x5eed_0001);
    for i in (1..n).rev() {
        labels.swap(i, order_rng.random_range(0..=i));
    }
    let stream = match spec.domain {
        Domain::Source => 0x5eed_0010,
        Domain::Target => 0x5eed_0020,
    };
    let mut rng = rng_stream(spec.seed, stream);
    let mut data = vec![0.0; n * per_image];
    for (i, &c) in labels.iter().enumerate() {
        render(&mut rng, c, spec.classes, size, &style, &mut data[i * per_image..(i + 1) * per_image]);
    }
    Dataset::new(Tensor::new(&[n, 3, size, size], data)?, labels, spec.classes, spec.domain.tag(), spec.seed)
}
