//! In-memory labelled image sets.

use ndarray::{Array4, Axis};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::InputShape;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: InputShape,
    pub num_classes: usize,
    /// (n, channels, height, width), values in [0, 1].
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Array4<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, c, h, w) = images.dim();
        if labels.len() != n {
            return Err(Error::Dataset(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {num_classes} classes")));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            shape: InputShape::new(c, h, w),
            num_classes,
            images: images.as_standard_layout().to_owned(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the examples at `indices` into a contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Array4<f64>, Vec<usize>) {
        let x = self.images.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.batch(indices);
        Self {
            shape: self.shape,
            num_classes: self.num_classes,
            images,
            labels,
        }
    }

    /// SHA-256 over shape, class count, little-endian pixel bits and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.shape.channels, self.shape.height, self.shape.width, self.num_classes, self.len()] {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.images.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Pads by 4 pixels (zeros), takes a random crop of the original size and
/// flips horizontally with probability 1/2, per example.
pub fn augment_crop_flip<R: Rng + ?Sized>(x: &mut Array4<f64>, rng: &mut R) {
    const PAD: i64 = 4;
    let (n, c, h, w) = x.dim();
    for i in 0..n {
        let dy = rng.random_range(-PAD..=PAD);
        let dx = rng.random_range(-PAD..=PAD);
        let flip = rng.random_bool(0.5);
        let src = x.index_axis(Axis(0), i).to_owned();
        let mut dst = x.index_axis_mut(Axis(0), i);
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let sx = if flip { w - 1 - xx } else { xx } as i64 + dx;
                    let sy = yy as i64 + dy;
                    dst[[ch, yy, xx]] = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        src[[ch, sy as usize, sx as usize]]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> Dataset {
        let images = Array4::from_shape_fn((3, 1, 2, 2), |(i, _, y, x)| (i + y + x) as f64 / 10.0);
        Dataset::new(images, vec![0, 1, 0], 2).unwrap()
    }

    #[test]
    fn rejects_bad_inputs() {
        let images = Array4::from_elem((2, 1, 2, 2), 0.5);
        assert!(Dataset::new(images.clone(), vec![0], 2).is_err());
        assert!(Dataset::new(images.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(images * 3.0, vec![0, 1], 2).is_err());
    }

    #[test]
    fn batch_and_hash() {
        let d = tiny();
        let (x, y) = d.batch(&[2, 0]);
        assert_eq!(y, vec![0, 0]);
        assert_eq!(x.index_axis(Axis(0), 0), d.images.index_axis(Axis(0), 2));
        assert_eq!(d.content_hash(), tiny().content_hash());
        assert_ne!(d.content_hash(), d.subset(&[0, 1]).content_hash());
    }

    #[test]
    fn augmentation_keeps_range() {
        let mut x = tiny().images;
        augment_crop_flip(&mut x, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
