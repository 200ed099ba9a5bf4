//! CIFAR-10 binary batches and MNIST IDX files, plus a writer for small
//! synthetic datasets in the CIFAR-10 binary layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by three 32×32 colour planes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Cifar10,
    Mnist,
}

/// Images stored as `[n, channels, height, width]` floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// The first `n` examples (or all of them when `n` is larger).
    pub fn truncate(&mut self, n: usize) {
        let n = n.min(self.len());
        self.images.truncate(n * self.image_len());
        self.labels.truncate(n);
    }

    /// Copies the listed examples into a `[k, C, H, W]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<u8>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("index {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(&[indices.len(), self.channels, self.height, self.width], data)?;
        Ok((t, labels))
    }

    fn append(&mut self, other: Dataset) -> Result<()> {
        if (other.channels, other.height, other.width) != (self.channels, self.height, self.width) {
            return Err(Error::Data("image shapes differ between files".into()));
        }
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        Ok(())
    }
}

/// Train and holdout splits normalized with the training split's per-channel statistics.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

/// Parses one CIFAR-10 binary batch; pixels are scaled to `[0, 1]`.
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data(format!(
            "truncated CIFAR-10 batch: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Data(format!("CIFAR-10 label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        images.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok(Dataset {
        images,
        labels,
        channels: CIFAR_CHANNELS,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        classes: CIFAR_CLASSES,
    })
}

fn cifar_root(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Unnormalized CIFAR-10 train and test splits.
pub fn load_cifar10_raw(dir: &Path) -> Result<(Dataset, Dataset)> {
    let root = cifar_root(dir);
    let mut train: Option<Dataset> = None;
    for f in CIFAR_TRAIN_FILES {
        let part = parse_cifar_batch(&read(&root.join(f))?)?;
        match &mut train {
            Some(t) => t.append(part)?,
            None => train = Some(part),
        }
    }
    let test = parse_cifar_batch(&read(&root.join(CIFAR_TEST_FILE))?)?;
    Ok((train.expect("five training files"), test))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data("truncated IDX header".into()))
}

/// `(count, rows, cols, pixels)` from an IDX image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Data(format!(
            "truncated IDX images: expected {} pixel bytes, found {}",
            n * rows * cols,
            body.len()
        )));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Data(format!(
            "truncated IDX labels: expected {n}, found {}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

fn find_idx(dir: &Path, stem: &str, kind: &str) -> Result<PathBuf> {
    for name in [format!("{stem}-{kind}"), format!("{stem}.{kind}")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!("missing {stem}-{kind} in {}", dir.display())))
}

fn load_mnist_split(dir: &Path, prefix: &str) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read(&find_idx(dir, &format!("{prefix}-images"), "idx3-ubyte")?)?)?;
    let labels = parse_idx_labels(&read(&find_idx(dir, &format!("{prefix}-labels"), "idx1-ubyte")?)?)?;
    if labels.len() != n {
        return Err(Error::Data(format!("{n} MNIST images but {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::Data(format!("MNIST label {l} out of range")));
    }
    Ok(Dataset {
        images: pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        labels,
        channels: 1,
        height: rows,
        width: cols,
        classes: 10,
    })
}

pub fn load_mnist_raw(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_mnist_split(dir, "train")?, load_mnist_split(dir, "t10k")?))
}

/// Per-channel mean and standard deviation over every image and position.
pub fn channel_stats(d: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let plane = d.height * d.width;
    let mut mean = vec![0.0; d.channels];
    let mut var = vec![0.0; d.channels];
    let count = (d.len() * plane) as f64;
    for (c, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
        let planes = || (0..d.len()).map(move |i| &d.images[(i * d.channels + c) * plane..][..plane]);
        *m = planes().flatten().map(|&x| x as f64).sum::<f64>() / count;
        *v = planes().flatten().map(|&x| (x as f64 - *m).powi(2)).sum::<f64>() / count;
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Applies `(x − mean) / std` per channel; zero deviations are left unscaled.
pub fn normalize(d: &mut Dataset, mean: &[f64], std: &[f64]) {
    let plane = d.height * d.width;
    for (k, v) in d.images.iter_mut().enumerate() {
        let c = (k / plane) % d.channels;
        let s = if std[c] > 0.0 { std[c] } else { 1.0 };
        *v = ((*v as f64 - mean[c]) / s) as f32;
    }
}

/// Loads both splits and normalizes them with the training statistics.
pub fn load_dataset(name: DatasetName, dir: &Path) -> Result<Splits> {
    let (mut train, mut test) = match name {
        DatasetName::Cifar10 => load_cifar10_raw(dir)?,
        DatasetName::Mnist => load_mnist_raw(dir)?,
    };
    let (mean, std) = channel_stats(&train);
    normalize(&mut train, &mean, &std);
    normalize(&mut test, &mean, &std);
    Ok(Splits { train, test, mean, std })
}

/// Serializes `(label, CHW pixels)` records in the CIFAR-10 binary layout.
pub fn encode_cifar_batch(records: &[(u8, Vec<u8>)]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD);
    for (label, pixels) in records {
        if pixels.len() != CIFAR_RECORD - 1 {
            return Err(Error::Data(format!(
                "CIFAR-10 image needs {} bytes, got {}",
                CIFAR_RECORD - 1,
                pixels.len()
            )));
        }
        out.push(*label);
        out.extend_from_slice(pixels);
    }
    Ok(out)
}

pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        out.extend_from_slice(im);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Class-conditional images: each class owns a random oriented sinusoid per
/// channel, and every sample adds pixel noise and a random phase jitter.
pub fn synthetic_cifar_records<R: Rng + ?Sized>(n: usize, class_seed: u64, rng: &mut R) -> Vec<(u8, Vec<u8>)> {
    let mut crng = ChaCha8Rng::seed_from_u64(class_seed);
    let patterns: Vec<[(f64, f64, f64, f64); CIFAR_CHANNELS]> = (0..CIFAR_CLASSES)
        .map(|_| {
            std::array::from_fn(|_| {
                (
                    crng.random_range(-0.6..0.6),
                    crng.random_range(-0.6..0.6),
                    crng.random_range(0.0..std::f64::consts::TAU),
                    crng.random_range(40.0..90.0),
                )
            })
        })
        .collect();
    let noise = Normal::new(0.0, 48.0).expect("valid normal");
    (0..n)
        .map(|_| {
            let label = rng.random_range(0..CIFAR_CLASSES);
            let jitter = rng.random_range(-0.8..0.8);
            let mut px = Vec::with_capacity(CIFAR_RECORD - 1);
            for &(fx, fy, phase, amp) in &patterns[label] {
                for y in 0..CIFAR_SIDE {
                    for x in 0..CIFAR_SIDE {
                        let s = (fx * x as f64 + fy * y as f64 + phase + jitter).sin();
                        let v = 128.0 + amp * s + noise.sample(rng);
                        px.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            (label as u8, px)
        })
        .collect()
}

/// Writes a complete CIFAR-10-format directory with `train_per_file` records
/// in each of the five training files and `test` records in the test file.
pub fn write_synthetic_cifar(dir: &Path, train_per_file: usize, test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for f in CIFAR_TRAIN_FILES {
        let recs = synthetic_cifar_records(train_per_file, seed, &mut rng);
        fs::write(dir.join(f), encode_cifar_batch(&recs)?)?;
    }
    let recs = synthetic_cifar_records(test, seed, &mut rng);
    fs::write(dir.join(CIFAR_TEST_FILE), encode_cifar_batch(&recs)?)?;
    Ok(())
}
