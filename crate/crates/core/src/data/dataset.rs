use std::path::Path;

use coboost_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::readers;
use crate::error::{Error, Result};

pub const SUPPORTED_DATASETS: &[&str] = &["synthetic_blobs", "MNIST", "FMNIST", "SVHN", "CIFAR10", "CIFAR100"];

/// Per-channel standardization applied after scaling pixels to `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    fn for_dataset(name: &str) -> Self {
        let (mean, std): (&[f64], &[f64]) = match name {
            "MNIST" => (&[0.1307], &[0.3081]),
            "FMNIST" => (&[0.2860], &[0.3530]),
            "SVHN" => (&[0.4377, 0.4438, 0.4728], &[0.1980, 0.2010, 0.1970]),
            "CIFAR10" => (&[0.4914, 0.4822, 0.4465], &[0.2470, 0.2435, 0.2616]),
            "CIFAR100" => (&[0.5071, 0.4865, 0.4409], &[0.2673, 0.2564, 0.2762]),
            _ => (&[BLOB_MEAN], &[BLOB_STD]),
        };
        Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        }
    }

    /// `[0,1]` pixel value to normalized value.
    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// Flat storage for one split: samples are contiguous, row-major `[C,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    samples: Vec<f64>,
    labels: Vec<usize>,
    sample_len: usize,
}

impl Split {
    pub(crate) fn new(samples: Vec<f64>, labels: Vec<usize>, sample_len: usize) -> Self {
        debug_assert_eq!(samples.len(), labels.len() * sample_len);
        Self {
            samples,
            labels,
            sample_len,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.sample_len..(i + 1) * self.sample_len]
    }

    /// Batch tensor `[indices.len(), C, H, W]` and matching labels.
    pub fn gather(&self, indices: &[usize], shape: [usize; 3]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(vec![indices.len(), shape[0], shape[1], shape[2]], data)
            .expect("split sample length matches shape");
        (t, labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub name: String,
    pub num_classes: usize,
    /// `(channels, height, width)`
    pub sample_shape: [usize; 3],
    pub normalization: Normalization,
    pub train: Split,
    pub test: Split,
}

impl DatasetHandle {
    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn train_batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        self.train.gather(indices, self.sample_shape)
    }

    pub fn test_batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        self.test.gather(indices, self.sample_shape)
    }

    /// Image of `[0,1]` under the normalization, per channel, as `(low, high)`.
    pub fn normalized_range(&self) -> Vec<(f64, f64)> {
        (0..self.sample_shape[0])
            .map(|c| (self.normalization.normalize(c, 0.0), self.normalization.normalize(c, 1.0)))
            .collect()
    }

    pub(crate) fn from_raw(
        name: &str,
        num_classes: usize,
        sample_shape: [usize; 3],
        train: (Vec<u8>, Vec<usize>),
        test: (Vec<u8>, Vec<usize>),
    ) -> Self {
        let normalization = Normalization::for_dataset(name);
        let plane = sample_shape[1] * sample_shape[2];
        let sample_len = sample_shape[0] * plane;
        let convert = |(pixels, labels): (Vec<u8>, Vec<usize>)| {
            let samples = pixels
                .iter()
                .enumerate()
                .map(|(i, &p)| normalization.normalize((i % sample_len) / plane, p as f64 / 255.0))
                .collect();
            Split::new(samples, labels, sample_len)
        };
        let (train, test) = (convert(train), convert(test));
        Self {
            name: name.to_string(),
            num_classes,
            sample_shape,
            normalization,
            train,
            test,
        }
    }
}

/// Loads a dataset by name. `root` is ignored for the built-in
/// `synthetic_blobs` dataset.
pub fn load_dataset(name: &str, root: &Path) -> Result<DatasetHandle> {
    match name {
        "synthetic_blobs" => Ok(synthetic_blobs()),
        "MNIST" | "FMNIST" => readers::load_idx(name, root),
        "CIFAR10" => readers::load_cifar10(root),
        "CIFAR100" => readers::load_cifar100(root),
        "SVHN" => readers::load_svhn(root),
        other => Err(Error::UnknownDataset(other.to_string())),
    }
}

pub(crate) const BLOB_CLASSES: usize = 10;
pub(crate) const BLOB_TRAIN_PER_CLASS: usize = 200;
pub(crate) const BLOB_TEST_PER_CLASS: usize = 50;
const BLOB_SIDE: usize = 8;
const BLOB_SEED: u64 = 0x0b10_b5ee_d000_0001;
const BLOB_MEAN: f64 = 0.1414;
const BLOB_STD: f64 = 0.2042;

/// Gaussian class blobs drawn as 1x8x8 images. Each class places a bump of
/// light at its own spot on a ring around the image centre; samples jitter the
/// spot, its brightness, and add pixel noise. Generated from a fixed seed so
/// the dataset is identical everywhere.
fn synthetic_blobs() -> DatasetHandle {
    let mut rng = ChaCha8Rng::seed_from_u64(BLOB_SEED);
    let train = blob_split(&mut rng, BLOB_TRAIN_PER_CLASS);
    let test = blob_split(&mut rng, BLOB_TEST_PER_CLASS);
    DatasetHandle::from_raw("synthetic_blobs", BLOB_CLASSES, [1, BLOB_SIDE, BLOB_SIDE], train, test)
}

fn blob_split(rng: &mut ChaCha8Rng, per_class: usize) -> (Vec<u8>, Vec<usize>) {
    let jitter = Normal::new(0.0, 0.45).expect("valid normal");
    let pixel_noise = Normal::new(0.0, 0.08).expect("valid normal");
    let centre = (BLOB_SIDE as f64 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(per_class * BLOB_CLASSES * BLOB_SIDE * BLOB_SIDE);
    let mut labels = Vec::with_capacity(per_class * BLOB_CLASSES);
    // interleave classes so a contiguous prefix is balanced
    for _ in 0..per_class {
        for class in 0..BLOB_CLASSES {
            let angle = std::f64::consts::TAU * class as f64 / BLOB_CLASSES as f64;
            let cx = centre + 2.6 * angle.cos() + jitter.sample(rng);
            let cy = centre + 2.6 * angle.sin() + jitter.sample(rng);
            let amplitude = rng.random_range(0.7..1.0);
            let width = 1.3;
            for y in 0..BLOB_SIDE {
                for x in 0..BLOB_SIDE {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let v = amplitude * (-d2 / (2.0 * width * width)).exp() + pixel_noise.sample(rng);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
            labels.push(class);
        }
    }
    (pixels, labels)
}
