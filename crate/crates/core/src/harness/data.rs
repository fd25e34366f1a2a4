//! Dataset sources: the seeded synthetic toy task and binary image records
//! (CIFAR-10 layout) read from the dataset cache directory.

use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::seed::{rng_for, stream};

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "ARDIR_DATA_DIR";

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Seeded synthetic shapes on a noisy background.
    Toy {
        #[serde(default = "default_toy_classes")]
        classes: usize,
        #[serde(default = "default_toy_size")]
        size: usize,
        #[serde(default = "default_toy_train")]
        train: usize,
        #[serde(default = "default_toy_test")]
        test: usize,
        /// Amplitude of the uniform background noise.
        #[serde(default = "default_toy_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// CIFAR-10 binary batches under `<cache>/cifar-10-batches-bin`.
    Cifar10 {
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default)]
        expected_hash: Option<String>,
    },
    /// SVHN converted to the same 1 + 3072 byte record layout, as
    /// `<cache>/svhn-bin/{train,test}.bin`.
    Svhn {
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default)]
        expected_hash: Option<String>,
    },
}

fn default_toy_classes() -> usize {
    4
}
fn default_toy_size() -> usize {
    8
}
fn default_toy_train() -> usize {
    2000
}
fn default_toy_test() -> usize {
    500
}
fn default_toy_noise() -> f64 {
    0.1
}

impl DatasetSpec {
    pub fn toy() -> Self {
        DatasetSpec::Toy {
            classes: default_toy_classes(),
            size: default_toy_size(),
            train: default_toy_train(),
            test: default_toy_test(),
            noise: default_toy_noise(),
            seed: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Toy { classes, .. } => *classes,
            _ => 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Toy {
                classes,
                size,
                train,
                test,
                noise,
                ..
            } => {
                if !(2..=4).contains(classes) {
                    return Err(Error::config("dataset.classes must be 2, 3 or 4"));
                }
                if *size < 6 || size % 2 != 0 {
                    return Err(Error::config("dataset.size must be an even number >= 6"));
                }
                if *train == 0 || *test == 0 {
                    return Err(Error::config("dataset splits must be non-empty"));
                }
                if !(0.0..=1.0).contains(noise) {
                    return Err(Error::config("dataset.noise must lie in [0, 1]"));
                }
            }
            DatasetSpec::Cifar10 {
                train_limit, test_limit, ..
            }
            | DatasetSpec::Svhn {
                train_limit, test_limit, ..
            } => {
                if *train_limit == Some(0) || *test_limit == Some(0) {
                    return Err(Error::config("dataset splits must be non-empty"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Hash over both splits, recorded in run manifests.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.train.content_hash().as_bytes());
        h.update(self.test.content_hash().as_bytes());
        hex::encode(h.finalize())
    }
}

pub fn ingest_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    match spec {
        DatasetSpec::Toy {
            classes,
            size,
            train,
            test,
            noise,
            seed,
        } => Ok(Splits {
            train: toy_split(*classes, *size, *train, *noise, *seed, 0)?,
            test: toy_split(*classes, *size, *test, *noise, *seed, 1)?,
        }),
        DatasetSpec::Cifar10 {
            train_limit,
            test_limit,
            expected_hash,
        } => {
            let dir = data_dir().join("cifar-10-batches-bin");
            let train_files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            let splits = Splits {
                train: read_records(&train_files, *train_limit)?,
                test: read_records(&[dir.join("test_batch.bin")], *test_limit)?,
            };
            check_hash(&splits, expected_hash.as_deref())?;
            Ok(splits)
        }
        DatasetSpec::Svhn {
            train_limit,
            test_limit,
            expected_hash,
        } => {
            let dir = data_dir().join("svhn-bin");
            let splits = Splits {
                train: read_records(&[dir.join("train.bin")], *train_limit)?,
                test: read_records(&[dir.join("test.bin")], *test_limit)?,
            };
            check_hash(&splits, expected_hash.as_deref())?;
            Ok(splits)
        }
    }
}

fn check_hash(splits: &Splits, expected: Option<&str>) -> Result<()> {
    match expected {
        Some(e) if e != splits.content_hash() => Err(Error::Dataset(format!(
            "dataset hash mismatch: expected {e}, found {}",
            splits.content_hash()
        ))),
        _ => Ok(()),
    }
}

const RECORD_PIXELS: usize = 3 * 32 * 32;

/// Reads `label byte + 3072 channel-major pixel bytes` records.
pub fn read_records(files: &[PathBuf], limit: Option<usize>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in files {
        let mut b = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        if b.len() % (RECORD_PIXELS + 1) != 0 {
            return Err(Error::Dataset(format!(
                "{}: size {} is not a multiple of {}",
                f.display(),
                b.len(),
                RECORD_PIXELS + 1
            )));
        }
        bytes.append(&mut b);
    }
    let mut n = bytes.len() / (RECORD_PIXELS + 1);
    if let Some(l) = limit {
        n = n.min(l);
    }
    if n == 0 {
        return Err(Error::Dataset("no records found".into()));
    }
    let mut images = Array4::zeros((n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_PIXELS + 1).take(n).enumerate() {
        labels.push(rec[0] as usize);
        let dst = images
            .index_axis_mut(ndarray::Axis(0), i)
            .into_slice()
            .expect("standard layout");
        for (d, &s) in dst.iter_mut().zip(&rec[1..]) {
            *d = s as f64 / 255.0;
        }
    }
    Dataset::new(images, labels, 10)
}

pub fn write_records(data: &Dataset, path: &Path) -> Result<()> {
    if data.shape.numel() != RECORD_PIXELS {
        return Err(Error::Dataset("record files hold 3x32x32 images".into()));
    }
    let mut out = Vec::with_capacity(data.len() * (RECORD_PIXELS + 1));
    for i in 0..data.len() {
        out.push(data.labels[i] as u8);
        for v in data.images.index_axis(ndarray::Axis(0), i).iter() {
            out.push((v * 255.0).round() as u8);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

const TEXTURE_AMPLITUDE: f64 = 0.08;


/// A fixed +-amplitude periodic pattern per class (row stripes, column
/// stripes, checkerboard, 2x2 blocks). It predicts the label perfectly on
/// clean data but is small enough for an attacker to flip.
fn class_textures(classes: usize, size: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            (0..size * size)
                .map(|i| {
                    let (r, col) = (i / size, i % size);
                    let parity = match c {
                        0 => r,
                        1 => col,
                        2 => r + col,
                        _ => r / 2 + col / 2,
                    };
                    if parity % 2 == 0 {
                        TEXTURE_AMPLITUDE
                    } else {
                        -TEXTURE_AMPLITUDE
                    }
                })
                .collect()
        })
        .collect()
}

const SHAPE_AGREEMENT: f64 = 0.9;
const FOREGROUND: (f64, f64) = (0.6, 1.0);
const DISTRACTOR: (f64, f64) = (0.1, 0.35);

/// Two-pixel-thick class patterns: horizontal bar, vertical bar, diagonal,
/// filled square.
fn draw_pattern<R: Rng + ?Sized>(img: &mut [f64], size: usize, class: usize, intensity: f64, rng: &mut R) {
    let len = rng.random_range(size / 2..=size - 2);
    let mut set = |r: usize, c: usize| img[r * size + c] = intensity;
    match class {
        0 => {
            let r = rng.random_range(0..size - 1);
            let c0 = rng.random_range(0..=size - len);
            (c0..c0 + len).for_each(|c| {
                set(r, c);
                set(r + 1, c);
            });
        }
        1 => {
            let c = rng.random_range(0..size - 1);
            let r0 = rng.random_range(0..=size - len);
            (r0..r0 + len).for_each(|r| {
                set(r, c);
                set(r, c + 1);
            });
        }
        2 => {
            let r0 = rng.random_range(0..=size - len);
            let c0 = rng.random_range(0..size - len);
            (0..len).for_each(|k| {
                set(r0 + k, c0 + k);
                set(r0 + k, c0 + k + 1);
            });
        }
        _ => {
            let side = rng.random_range(3..=4);
            let r0 = rng.random_range(0..=size - side);
            let c0 = rng.random_range(0..=size - side);
            for r in r0..r0 + side {
                for c in c0..c0 + side {
                    set(r, c);
                }
            }
        }
    }
}

fn toy_split(classes: usize, size: usize, n: usize, noise: f64, seed: u64, split: u64) -> Result<Dataset> {
    let textures = class_textures(classes, size);
    let mut rng = rng_for(seed, &[stream::DATA, split]);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut images = Array4::zeros((n, 1, size, size));
    for (i, &label) in labels.iter().enumerate() {
        let mut img: Vec<f64> = (0..size * size).map(|_| rng.random::<f64>() * noise).collect();
        // the bright shape usually shows the label; a faint shape of another
        // class sits underneath
        let shape = if rng.random_bool(SHAPE_AGREEMENT) {
            label
        } else {
            (label + rng.random_range(1..classes)) % classes
        };
        let other = (shape + rng.random_range(1..classes)) % classes;
        let faint = rng.random_range(DISTRACTOR.0..DISTRACTOR.1);
        draw_pattern(&mut img, size, other, faint, &mut rng);
        let bright = rng.random_range(FOREGROUND.0..=FOREGROUND.1);
        draw_pattern(&mut img, size, shape, bright, &mut rng);
        for (p, t) in img.iter_mut().zip(&textures[label]) {
            *p = (*p + t).clamp(0.0, 1.0);
        }
        images
            .index_axis_mut(ndarray::Axis(0), i)
            .into_slice()
            .expect("standard layout")
            .copy_from_slice(&img);
    }
    Dataset::new(images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_deterministic_and_balanced() {
        let a = ingest_dataset(&DatasetSpec::toy()).unwrap();
        let b = ingest_dataset(&DatasetSpec::toy()).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.train.len(), 2000);
        assert_eq!(a.test.len(), 500);
        for c in 0..4 {
            assert_eq!(a.train.labels.iter().filter(|&&l| l == c).count(), 500);
        }
        assert_ne!(a.train.content_hash(), a.test.content_hash());
    }

    #[test]
    fn empty_split_is_rejected() {
        let spec = DatasetSpec::Toy {
            classes: 2,
            size: 8,
            train: 10,
            test: 0,
            noise: 0.1,
            seed: 0,
        };
        assert!(ingest_dataset(&spec).is_err());
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let images = Array4::from_shape_fn((3, 3, 32, 32), |(i, c, y, x)| ((i + c + y + x) % 256) as f64 / 255.0);
        let data = Dataset::new(images, vec![1, 9, 0], 10).unwrap();
        let path = dir.path().join("r.bin");
        write_records(&data, &path).unwrap();
        let back = read_records(&[path.clone()], None).unwrap();
        assert_eq!(back, data);
        assert_eq!(read_records(&[path], Some(2)).unwrap().len(), 2);
    }

    #[test]
    fn missing_source_is_an_error() {
        assert!(read_records(&[PathBuf::from("/nonexistent/ardir.bin")], None).is_err());
    }
}
