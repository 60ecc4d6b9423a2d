//! IDX ingestion and a synthetic classification task.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("empty dataset")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Flattened samples with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.first().map_or(0, Vec::len)
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn truncated(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.labels.truncate(n);
        self
    }

    pub fn refs(&self) -> Vec<&[f64]> {
        self.images.iter().map(Vec::as_slice).collect()
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Checks magic and length and returns the dimension sizes and the payload.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32) -> Result<(Vec<usize>, &'a [u8]), DatasetError> {
    let truncated = |expected| DatasetError::Truncated {
        path: path.to_owned(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DatasetError::BadMagic {
            path: path.to_owned(),
            expected: magic,
            found,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = (0..ndim).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    Ok((dims, &bytes[header..expected]))
}

/// Loads an IDX image/label pair; pixels are divided by 255.
pub fn load_idx_dataset(images: &Path, labels: &Path, split: Split) -> Result<Dataset, DatasetError> {
    let image_bytes = read(images)?;
    let label_bytes = read(labels)?;
    let (dims, pixels) = parse_idx(images, &image_bytes, IMAGES_MAGIC)?;
    let (label_dims, raw_labels) = parse_idx(labels, &label_bytes, LABELS_MAGIC)?;
    if dims[0] != label_dims[0] {
        return Err(DatasetError::CountMismatch {
            images: dims[0],
            labels: label_dims[0],
        });
    }
    let features = dims[1] * dims[2];
    let images: Vec<Vec<f64>> = if features == 0 {
        vec![Vec::new(); dims[0]]
    } else {
        pixels
            .chunks_exact(features)
            .map(|c| c.iter().map(|&p| f64::from(p) / 255.0).collect())
            .collect()
    };
    let labels: Vec<usize> = raw_labels.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        images,
        labels,
        classes,
        split,
    })
}

/// MNIST file names inside `dir`, as distributed.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset, DatasetError> {
    let (images, labels) = mnist_paths(dir, split);
    load_idx_dataset(&images, &labels, split)
}

/// Encodes images (values in `[0, 1]`, rounded to bytes) as an IDX file with
/// `rows × cols` pixels per sample.
pub fn encode_idx_images(images: &[Vec<f64>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend(IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    for img in images {
        assert_eq!(img.len(), rows * cols, "image size");
        out.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| u8::try_from(l).expect("label fits a byte")));
    out
}

/// Noisy prototypes: each class has a random prototype in `[0, 1]^features`
/// and samples add uniform noise of half-width `noise`, clamped to `[0, 1]`.
/// Prototypes depend only on `seed`, so train and test splits drawn with
/// different `sample_seed`s share them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTask {
    pub features: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn sample(&self, count: usize, split: Split, sample_seed: u64) -> Dataset {
        let mut proto_rng = ChaCha8Rng::seed_from_u64(self.seed);
        let prototypes: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| (0..self.features).map(|_| proto_rng.random::<f64>()).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let label = rng.random_range(0..self.classes);
            let img = prototypes[label]
                .iter()
                .map(|&p| (p + self.noise * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, 1.0))
                .collect();
            images.push(img);
            labels.push(label);
        }
        Dataset {
            images,
            labels,
            classes: self.classes,
            split,
        }
    }
}
