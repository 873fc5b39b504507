//! Datasets, synthetic domains and two-view augmentation.

pub mod augment;
pub mod io;
pub mod synth;

use rand::Rng;

pub use augment::{augment, two_views, AugmentConfig};
pub use synth::{gen_synthetic, Domain, SynthSpec};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Images in `[0, 1]` with class ids. Labels are only reachable through this
/// type; training consumes [`Unlabeled`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub domain_tag: String,
    pub seed: u64,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, domain_tag: &str, seed: u64) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("images must be [N, 3, H, W], got {s:?}")));
        }
        if labels.len() != s[0] {
            return Err(Error::Validation(format!("{} labels for {} images", labels.len(), s[0])));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("label {bad} out of range for {classes} classes")));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { images, labels, classes, domain_tag: domain_tag.to_string(), seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Label-free view for training.
    pub fn unlabeled(&self) -> Unlabeled<'_> {
        Unlabeled { images: &self.images }
    }

    /// `[n, 3, H, W]` copy of the listed images.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        self.unlabeled().gather(idx)
    }
}

/// Images without labels. The trainer's only access to data.
#[derive(Clone, Copy, Debug)]
pub struct Unlabeled<'a> {
    images: &'a Tensor,
}

impl<'a> Unlabeled<'a> {
    pub fn from_images(images: &'a Tensor) -> Self {
        Self { images }
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            out.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(&[idx.len(), c, h, w], out).expect("non-empty gather")
    }

    /// Shuffled index batches of exactly `batch_size`; a trailing partial
    /// batch is dropped.
    pub fn epoch_batches<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        order.chunks_exact(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}
