//! CIFAR-10 / CIFAR-100 binary batches.
//!
//! Each record is the label byte(s) followed by 3072 pixel bytes, stored as
//! three 32×32 planes (R, G, B). CIFAR-100 records carry a coarse and a fine
//! label; the fine one is used.

use std::path::{Path, PathBuf};

use super::{DatasetSplit, Splits};
use crate::arch::Dataset;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const PIXELS: usize = 3 * 32 * 32;

fn label_bytes(dataset: Dataset) -> usize {
    if dataset == Dataset::Cifar100 {
        2
    } else {
        1
    }
}

/// Decode the records of one batch file.
pub fn parse_records(bytes: &[u8], dataset: Dataset, path: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    let lb = label_bytes(dataset);
    let record = lb + PIXELS;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % record) as u64,
            detail: format!("size {} is not a multiple of the {record}-byte record", bytes.len()),
        });
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(record) {
        labels.push(r[lb - 1] as usize);
        pixels.extend_from_slice(&r[lb..]);
    }
    Ok((pixels, labels))
}

/// Encode images (values in `[0, 1]`, shape `(N, 3, 32, 32)`) as one batch
/// file. CIFAR-100 records get a zero coarse label.
pub fn encode_records(images: &Tensor<f32>, labels: &[usize], dataset: Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    for (img, &l) in images.data().chunks_exact(PIXELS).zip(labels) {
        if dataset == Dataset::Cifar100 {
            out.push(0);
        }
        out.push(l as u8);
        out.extend(img.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}

fn file_names(dataset: Dataset) -> Result<(Vec<String>, Vec<String>)> {
    match dataset {
        Dataset::Cifar10 => Ok((
            (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            vec!["test_batch.bin".into()],
        )),
        Dataset::Cifar100 => Ok((vec!["train.bin".into()], vec!["test.bin".into()])),
        Dataset::Mnist => Err(Error::invalid("load_cifar: dataset must be cifar10 or cifar100")),
    }
}

fn load_files(dir: &Path, files: &[String], dataset: Dataset) -> Result<DatasetSplit> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path: PathBuf = dir.join(f);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (p, l) = parse_records(&bytes, dataset, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let data = pixels.into_iter().map(|b| b as f32 / 255.0).collect();
    DatasetSplit::new(dataset, Tensor::new(&[n, 3, 32, 32], data)?, labels)
}

/// Load CIFAR-10 or CIFAR-100 from `dir`. The extracted archive directory
/// (`cifar-10-batches-bin`, `cifar-100-binary`) is also accepted as a child
/// of `dir`.
pub fn load_cifar(dir: impl AsRef<Path>, dataset: Dataset) -> Result<Splits> {
    let (train, test) = file_names(dataset)?;
    let mut dir = dir.as_ref().to_path_buf();
    if !dir.join(&test[0]).exists() {
        for sub in ["cifar-10-batches-bin", "cifar-100-binary"] {
            if dir.join(sub).join(&test[0]).exists() {
                dir = dir.join(sub);
                break;
            }
        }
    }
    Ok(Splits {
        train: load_files(&dir, &train, dataset)?,
        test: load_files(&dir, &test, dataset)?,
    })
}
