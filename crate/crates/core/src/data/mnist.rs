//! MNIST in IDX format.

use std::path::{Path, PathBuf};

use super::{DatasetSplit, Splits};
use crate::arch::Dataset;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

const FILES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, bytes.len(), "truncated header"))
}

/// Parse an IDX header, returning the dimension sizes and the offset of the
/// payload. `path` is only used for error messages.
fn header(bytes: &[u8], magic: u32, rank: usize, path: &Path) -> Result<(Vec<usize>, usize)> {
    let found = read_u32(bytes, 0, path)?;
    if found != magic {
        return Err(format_err(
            path,
            0,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let dims = (0..rank)
        .map(|i| read_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let need = start + dims.iter().product::<usize>();
    if bytes.len() < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated: {} bytes, header promises {need}", bytes.len()),
        ));
    }
    Ok((dims, start))
}

/// Decode an IDX3 image file into `(N, 1, H, W)` pixels scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let (dims, start) = header(bytes, IMAGES_MAGIC, 3, path)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let data = bytes[start..start + n * h * w]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Tensor::new(&[n, 1, h, w], data)
}

/// Decode an IDX1 label file.
pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let (dims, start) = header(bytes, LABELS_MAGIC, 1, path)?;
    Ok(bytes[start..start + dims[0]].iter().map(|&b| b as usize).collect())
}

/// Encode images (values in `[0, 1]`) as an IDX3 file. Used for fixtures.
pub fn encode_images(images: &Tensor<f32>) -> Vec<u8> {
    let s = images.shape();
    let mut out = IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [s[0], s[2], s[3]] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

fn read(path: PathBuf) -> Result<(Vec<u8>, PathBuf)> {
    std::fs::read(&path).map(|b| (b, path.clone())).map_err(|e| Error::io(path, e))
}

fn load_split(dir: &Path, images: &str, labels: &str) -> Result<DatasetSplit> {
    let (ib, ip) = read(dir.join(images))?;
    let (lb, lp) = read(dir.join(labels))?;
    let images = parse_images(&ib, &ip)?;
    let labels = parse_labels(&lb, &lp)?;
    if images.shape()[0] != labels.len() {
        return Err(format_err(
            &lp,
            4,
            format!("{} labels for {} images in {}", labels.len(), images.shape()[0], ip.display()),
        ));
    }
    DatasetSplit::new(Dataset::Mnist, images, labels)
}

/// Load the four standard MNIST files from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Splits> {
    let dir = dir.as_ref();
    Ok(Splits {
        train: load_split(dir, FILES[0].0, FILES[0].1)?,
        test: load_split(dir, FILES[1].0, FILES[1].1)?,
    })
}

/// Write a train and test split as the four MNIST files under `dir`.
pub fn write_mnist(dir: impl AsRef<Path>, train: (&Tensor<f32>, &[usize]), test: (&Tensor<f32>, &[usize])) -> Result<()> {
    let dir = dir.as_ref();
    for ((images, labels), (ifile, lfile)) in [train, test].into_iter().zip(FILES) {
        let ip = dir.join(ifile);
        std::fs::write(&ip, encode_images(images)).map_err(|e| Error::io(ip, e))?;
        let lp = dir.join(lfile);
        std::fs::write(&lp, encode_labels(labels)).map_err(|e| Error::io(lp, e))?;
    }
    Ok(())
}
