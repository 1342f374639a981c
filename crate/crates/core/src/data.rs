//! Datasets: MNIST IDX ingestion, synthetic generators, and epoch batching.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::Rng;
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-feature affine map `x ↦ (x - mean) / scale`, always fitted on a train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn fit(train: &Dataset) -> Self {
        let d = train.feature_len();
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for row in train.inputs.data().chunks_exact(d) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in train.inputs.data().chunks_exact(d) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var.iter().map(|v| (v / n).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Normalization { mean, scale }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, features...]`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(Error::CountMismatch { images: n, labels: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::ShapeMismatch(format!("label {bad} >= class count {classes}")));
        }
        let d = if n == 0 { 0 } else { inputs.len() / n };
        Ok(Dataset { inputs, labels, classes, split, normalization: Normalization::identity(d) })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.inputs.shape()[1..].iter().product()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Applies `norm` (fitted elsewhere) and records it.
    pub fn normalized(mut self, norm: &Normalization) -> Result<Self> {
        let d = self.feature_len();
        if norm.mean.len() != d {
            return Err(Error::LengthMismatch { expected: d, got: norm.mean.len() });
        }
        for row in self.inputs.data_mut().chunks_exact_mut(d) {
            for ((x, m), s) in row.iter_mut().zip(&norm.mean).zip(&norm.scale) {
                *x = (*x - m) / s;
            }
        }
        self.normalization = norm.clone();
        Ok(self)
    }

    /// Copies the listed samples into a batch.
    pub fn gather(&self, idx: &[usize]) -> Result<Batch> {
        let d = self.feature_len();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        Batch::new(Tensor::new(shape, data)?, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let d = self.feature_len();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = n;
        Dataset {
            inputs: Tensor::new(shape, self.inputs.data()[..n * d].to_vec()).expect("prefix shape"),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    /// Deterministic split into (first, second) with `first_len` samples in the first part.
    pub fn split_at(&self, first_len: usize) -> (Dataset, Dataset) {
        let first = self.head(first_len);
        let n = self.len();
        let d = self.feature_len();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = n - first.len();
        let second = Dataset {
            inputs: Tensor::new(shape, self.inputs.data()[first.len() * d..].to_vec()).expect("suffix shape"),
            labels: self.labels[first.len()..].to_vec(),
            classes: self.classes,
            split: Split::Test,
            normalization: self.normalization.clone(),
        };
        (first, second)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|_| Error::Truncated(path.to_path_buf()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(path.to_path_buf()))
}

/// Parses an IDX file with the expected magic; returns (dims, payload).
fn parse_idx<'a>(bytes: &'a [u8], expected: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::BadMagic { path: path.to_path_buf(), found: magic, expected });
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let payload = bytes.get(start..start + len).ok_or_else(|| Error::Truncated(path.to_path_buf()))?;
    Ok((dims, payload))
}

/// Reads an MNIST image/label IDX pair (optionally gzipped) into `[n, 1, 28, 28]`
/// inputs scaled to `[0, 1]`.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ibytes = read_maybe_gz(ipath)?;
    let lbytes = read_maybe_gz(lpath)?;
    let (idims, pixels) = parse_idx(&ibytes, IDX_IMAGES, ipath)?;
    let (ldims, raw_labels) = parse_idx(&lbytes, IDX_LABELS, lpath)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch { images: idims[0], labels: ldims[0] });
    }
    let n = idims[0];
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = Tensor::new(vec![n, 1, idims[1], idims[2]], data)?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    Dataset::new(inputs, labels, 10, split)
}

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from a directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let pick = |stem: &str| {
        let plain = dir.join(stem);
        if plain.exists() {
            plain
        } else {
            dir.join(format!("{stem}.gz"))
        }
    };
    let train = load_mnist_idx(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"), Split::Train)?;
    let test = load_mnist_idx(pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte"), Split::Test)?;
    Ok((train, test))
}

/// `classes` isotropic unit-variance Gaussian clusters whose centers are
/// pairwise `separation` apart (orthogonal axes when `classes <= dim`, evenly
/// spaced on the first axis otherwise). Labels cycle through the classes.
pub fn synth_blobs(n: usize, classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes || dim == 0 {
        return Err(Error::InvalidConfig(format!("synth_blobs needs n >= classes >= 1, got n={n}, classes={classes}")));
    }
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let mut c = vec![0.0; dim];
            if classes <= dim {
                c[k] = separation / std::f64::consts::SQRT_2;
            } else {
                c[0] = separation * k as f64;
            }
            c
        })
        .collect();
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        data.extend(centers[k].iter().map(|c| c + rng.standard_normal()));
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes, Split::Train)
}

/// Single-channel `side × side` images: a fixed random template per class plus
/// Gaussian pixel noise of stddev `noise`.
pub fn synth_patterns(n: usize, classes: usize, side: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes || side == 0 {
        return Err(Error::InvalidConfig("synth_patterns needs n >= classes >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let d = side * side;
    let templates: Vec<Vec<f64>> = (0..classes).map(|_| (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        data.extend(templates[k].iter().map(|t| t + noise * rng.standard_normal()));
    }
    Dataset::new(Tensor::new(vec![n, 1, side, side], data)?, labels, classes, Split::Train)
}

/// Index lists for one epoch: a seeded shuffle cut into `batch_size` pieces,
/// the last one possibly short.
pub fn batches(n: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(epoch_seed).shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
