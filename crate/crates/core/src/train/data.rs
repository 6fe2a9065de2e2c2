//! MNIST (IDX) and CIFAR-10 (binary batch) loaders.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MNIST_MEAN: [f32; 1] = [0.1307];
pub const MNIST_STD: [f32; 1] = [0.3081];
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Normalized images with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, C, H, W]`, standardized per channel.
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub split: Split,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Image side; images are square.
    pub fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    fn sample_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Gathers the samples at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let len = self.sample_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&src[i * len..(i + 1) * len]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (Tensor::from_vec(&shape, data).expect("batch extents"), labels)
    }

    /// First `n` samples (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, _) = self.batch(&idx);
        Dataset { images, labels: self.labels[..n].to_vec(), split: self.split, num_classes: self.num_classes }
    }

    /// Count of each label.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), offset, msg: msg.into() }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| {
            format_err(path, bytes.len() as u64, format!("header needs {} bytes, file has {}", offset + 4, bytes.len()))
        })
}

fn normalize(pixels: &[u8], channels: usize, mean: &[f32], std: &[f32]) -> Vec<f32> {
    let plane = pixels.len() / channels.max(1);
    pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = (i / plane.max(1)) % channels;
            (p as f32 / 255.0 - mean[c]) / std[c]
        })
        .collect()
}

/// Parses an IDX image file (`0x00000803`) and label file (`0x00000801`).
/// Pixels are scaled to `[0, 1]` and standardized with the MNIST statistics.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img = read(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(images_path, 0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    if rows != cols {
        return Err(format_err(images_path, 8, format!("images must be square, got {rows}x{cols}")));
    }
    let expected = 16 + n * rows * cols;
    if img.len() != expected {
        return Err(format_err(
            images_path,
            img.len().min(expected) as u64,
            format!("expected {expected} bytes for {n} images of {rows}x{cols}, found {}", img.len()),
        ));
    }
    let lab = read(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(labels_path, 0, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let nl = be_u32(&lab, 4, labels_path)? as usize;
    if nl != n {
        return Err(format_err(labels_path, 4, format!("{nl} labels for {n} images")));
    }
    if lab.len() != 8 + n {
        return Err(format_err(
            labels_path,
            lab.len().min(8 + n) as u64,
            format!("expected {} bytes for {n} labels, found {}", 8 + n, lab.len()),
        ));
    }
    let labels = lab[8..].to_vec();
    if let Some(pos) = labels.iter().position(|&l| l >= 10) {
        return Err(format_err(labels_path, (8 + pos) as u64, format!("label {} out of range", labels[pos])));
    }
    let mut out = Vec::with_capacity(n * rows * cols);
    for s in 0..n {
        let px = &img[16 + s * rows * cols..16 + (s + 1) * rows * cols];
        out.extend(normalize(px, 1, &MNIST_MEAN, &MNIST_STD));
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 1, rows, cols], out)?,
        labels,
        split,
        num_classes: 10,
    })
}

/// Standard IDX file pair inside `dir` for `split`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
}

/// Loads the MNIST split stored under its standard file names in `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (i, l) = mnist_paths(dir, split);
    load_idx(&i, &l, split)
}

/// Parses CIFAR-10 binary batches from `dir`: `data_batch_1.bin` to
/// `data_batch_5.bin` (those present) for training, `test_batch.bin` for test.
/// Each record is a label byte followed by 3072 channel-major pixels.
pub fn load_cifar10_bin(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).filter(|p| p.exists()).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    if files.is_empty() {
        let missing = dir.join("data_batch_1.bin");
        return Err(Error::io(missing, std::io::Error::new(std::io::ErrorKind::NotFound, "no CIFAR-10 batches")));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in &files {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(format_err(
                path,
                (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
                format!("size {} is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] >= 10 {
                return Err(format_err(path, (r * CIFAR_RECORD) as u64, format!("label {} out of range", rec[0])));
            }
            labels.push(rec[0]);
            images.extend(normalize(&rec[1..], 3, &CIFAR_MEAN, &CIFAR_STD));
        }
    }
    let n = labels.len();
    Ok(Dataset { images: Tensor::from_vec(&[n, 3, 32, 32], images)?, labels, split, num_classes: 10 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(dir: &Path, n: u32, labels: &[u8]) -> (PathBuf, PathBuf) {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, 2, 2] {
            img.extend(v.to_be_bytes());
        }
        img.extend((0..n * 4).map(|i| (i * 17 % 256) as u8));
        let mut lab = Vec::new();
        for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
            lab.extend(v.to_be_bytes());
        }
        lab.extend(labels);
        let (ip, lp) = (dir.join("img"), dir.join("lab"));
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn parses_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_pair(dir.path(), 3, &[0, 9, 4]);
        let ds = load_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.images.shape(), &[3, 1, 2, 2]);
        assert_eq!(ds.labels, vec![0, 9, 4]);
        assert_eq!(ds.images.data()[0], (0.0 - 0.1307) / 0.3081);
    }

    #[test]
    fn truncated_images_name_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_pair(dir.path(), 3, &[0, 1, 2]);
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        match load_idx(&ip, &lp, Split::Train) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 27);
                assert!(msg.contains("expected 28") && msg.contains("found 27"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_pair(dir.path(), 3, &[0, 1]);
        assert!(matches!(load_idx(&ip, &lp, Split::Train), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn cifar_record_zero() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat(255u8).take(3072));
        std::fs::write(dir.path().join("test_batch.bin"), &rec).unwrap();
        let ds = load_cifar10_bin(dir.path(), Split::Test).unwrap();
        assert_eq!(ds.labels, vec![7]);
        let max = ds.images.data().iter().cloned().fold(f32::MIN, f32::max);
        let expect = (0..3).map(|c| (1.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]).fold(f32::MIN, f32::max);
        assert_eq!(max, expect);
    }

    #[test]
    fn cifar_partial_record_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data_batch_1.bin"), vec![1u8; CIFAR_RECORD + 5]).unwrap();
        assert!(matches!(
            load_cifar10_bin(dir.path(), Split::Train),
            Err(Error::Format { offset, .. }) if offset == CIFAR_RECORD as u64
        ));
    }

    #[test]
    fn batch_gathers_rows() {
        let ds = Dataset {
            images: Tensor::from_vec(&[3, 1, 1, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
            labels: vec![1, 2, 3],
            split: Split::Train,
            num_classes: 10,
        };
        let (x, y) = ds.batch(&[2, 0]);
        assert_eq!(x.to_vec(), vec![4.0, 5.0, 0.0, 1.0]);
        assert_eq!(y, vec![3, 1]);
    }
}
