//! Dataset loading, normalization, augmentation and batching.

mod cifar;
mod mnist;

use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use cifar::{encode_records, load_cifar, parse_records};
pub use mnist::{encode_images, encode_labels, load_mnist, parse_images, parse_labels, write_mnist};

use crate::arch::Dataset;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Zero padding on each side before the random crop.
pub const CROP_PAD: usize = 4;

/// Clamp for per-channel standard deviation so constant channels map to 0.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitMeta {
    pub dataset: Dataset,
    pub num_classes: usize,
    /// Per-channel means of the pixels as loaded (before normalization).
    pub channel_means: Vec<f64>,
}

/// Images in `(N, C, H, W)` layout with one label per image.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub meta: SplitMeta,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

fn channel_stats(images: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let s = images.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, plane) in images.data().chunks_exact(hw).enumerate() {
        mean[i % c] += plane.iter().map(|&v| v as f64).sum::<f64>();
    }
    let count = (n * hw) as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, plane) in images.data().chunks_exact(hw).enumerate() {
        let m = mean[i % c];
        var[i % c] += plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
    }
    let std = var.into_iter().map(|v| (v / count).sqrt()).collect();
    (mean, std)
}

impl DatasetSplit {
    pub fn new(dataset: Dataset, images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        let s = images.shape().to_vec();
        let expect = [dataset.in_channels(), dataset.input_size(), dataset.input_size()];
        if s.len() != 4 || s[0] == 0 || s[1..] != expect {
            return Err(Error::InvalidShape {
                op: "dataset",
                shape: s,
                reason: format!("{} expects (N>0, {}, {}, {})", dataset.name(), expect[0], expect[1], expect[2]),
            });
        }
        if s[0] != labels.len() {
            return Err(Error::invalid(format!("{} images but {} labels", s[0], labels.len())));
        }
        let num_classes = dataset.num_classes();
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes: num_classes,
            });
        }
        let (channel_means, _) = channel_stats(&images);
        Ok(Self {
            images,
            labels,
            meta: SplitMeta {
                dataset,
                num_classes,
                channel_means,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// Gather the given examples into a batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Batch {
            images: Tensor::new(&[indices.len(), c, h, w], data).expect("batch shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` examples (all of them if `n` exceeds the size).
    pub fn subset(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let b = self.gather(&idx);
        Self::new(self.meta.dataset, b.images, b.labels)
    }

    /// Count of examples per class.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.meta.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Per-channel affine normalization fitted on a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Means and (optionally) standard deviations of `train`. With
    /// `divide_std` off the std is 1 and only the means are subtracted.
    pub fn fit(train: &DatasetSplit, divide_std: bool) -> Self {
        let (mean, std) = channel_stats(&train.images);
        let std = if divide_std {
            std.into_iter().map(|s| s.max(STD_FLOOR)).collect()
        } else {
            vec![1.0; mean.len()]
        };
        Self { mean, std }
    }

    pub fn apply(&self, split: &mut DatasetSplit) {
        let c = self.mean.len();
        let hw = split.images.shape()[2] * split.images.shape()[3];
        for (i, plane) in split.images.data_mut().chunks_exact_mut(hw).enumerate() {
            let (m, s) = (self.mean[i % c], self.std[i % c]);
            for v in plane {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
    }
}

/// Normalize both splits with statistics from the training split only.
pub fn preprocess(splits: &mut Splits, divide_std: bool) -> Normalization {
    let norm = Normalization::fit(&splits.train, divide_std);
    norm.apply(&mut splits.train);
    norm.apply(&mut splits.test);
    norm
}

/// Deterministic crop of the zero-padded image at offset `(dy, dx)` in the
/// padded frame, optionally mirrored left-right. `(CROP_PAD, CROP_PAD)`
/// without flip is the identity.
pub fn crop_flip(image: &[f32], shape: [usize; 3], dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &image[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = (y + dy).wrapping_sub(CROP_PAD);
            if sy >= h {
                continue;
            }
            for x in 0..w {
                let px = if flip { w - 1 - x } else { x };
                let sx = (px + dx).wrapping_sub(CROP_PAD);
                if sx < w {
                    dst[y * w + x] = src[sy * w + sx];
                }
            }
        }
    }
    out
}

/// Pad by 4, take a random crop of the original size and flip with
/// probability 0.5.
pub fn augment<R: Rng + ?Sized>(image: &[f32], shape: [usize; 3], rng: &mut R) -> Vec<f32> {
    let dy = rng.random_range(0..=2 * CROP_PAD);
    let dx = rng.random_range(0..=2 * CROP_PAD);
    let flip = rng.random_bool(0.5);
    crop_flip(image, shape, dy, dx, flip)
}

/// Augment every image of a batch in place.
pub fn augment_batch<R: Rng + ?Sized>(batch: &mut Batch, rng: &mut R) {
    let s = batch.images.shape();
    let shape = [s[1], s[2], s[3]];
    let len = shape.iter().product();
    for img in batch.images.data_mut().chunks_exact_mut(len) {
        let out = augment(img, shape, rng);
        img.copy_from_slice(&out);
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Visiting order for one pass: a seeded permutation, or the identity.
pub fn epoch_order(n: usize, shuffle: bool, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// One pass over a split in batches of `batch`; the final batch may be short.
pub struct Batches<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let b = self.split.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(b)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

pub fn batch_iter(split: &DatasetSplit, batch: usize, shuffle: bool, seed: u64) -> Result<Batches<'_>> {
    if batch == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    Ok(Batches {
        split,
        order: epoch_order(split.len(), shuffle, seed),
        batch,
        pos: 0,
    })
}

/// Run `consume` over `iter` while a producer thread keeps up to `depth`
/// items ready. With `depth == 0` the iterator is consumed inline.
pub fn with_prefetch<I, R>(iter: I, depth: usize, consume: impl FnOnce(&mut dyn Iterator<Item = I::Item>) -> R) -> R
where
    I: Iterator + Send,
    I::Item: Send,
{
    if depth == 0 {
        let mut iter = iter;
        return consume(&mut iter);
    }
    std::thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel(depth);
        s.spawn(move || {
            for item in iter {
                if tx.send(item).is_err() {
                    break;
                }
            }
        });
        let mut items = rx.into_iter();
        let out = consume(&mut items);
        // Unblock the producer if the consumer stopped early.
        drop(items);
        out
    })
}
