//! Datasets: MNIST IDX ingestion and synthetic Gaussian blobs.

pub mod idx;

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use idx::{load_idx, parse_idx, IdxData};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Labelled samples; `images` is `[n, ...sample_shape]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.ndim() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::shape("Dataset::new", images.shape(), &[labels.len()]));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Reinterprets every sample with a new shape of equal size.
    pub fn with_sample_shape(mut self, shape: &[usize]) -> Result<Self> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        self.images = self.images.reshape(&full)?;
        Ok(self)
    }

    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::from_parts(shape, data), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Contiguous sub-range as a new dataset.
    pub fn slice(&self, start: usize, end: usize, split: Split) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Data(format!("bad slice {start}..{end} of {} samples", self.len())));
        }
        let (images, labels) = self.gather(&(start..end).collect::<Vec<_>>());
        Dataset::new(images, labels, split)
    }

    /// Splits off the last `n` samples as a validation set.
    pub fn split_tail(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Data(format!("cannot hold out {n} of {} samples", self.len())));
        }
        let cut = self.len() - n;
        Ok((self.slice(0, cut, self.split)?, self.slice(cut, self.len(), Split::Val)?))
    }
}

/// Standard MNIST file names inside `dir`, uncompressed.
pub fn mnist_paths(dir: &Path, split: Split) -> (std::path::PathBuf, std::path::PathBuf) {
    let prefix = match split {
        Split::Test => "t10k",
        Split::Train | Split::Val => "train",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Loads the MNIST training (`Split::Train`) or test (`Split::Test`) files.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (img_path, lbl_path) = mnist_paths(dir, split);
    let IdxData::Images(images) = load_idx(&img_path)? else {
        return Err(Error::Format {
            path: img_path,
            reason: "expected an image file".into(),
        });
    };
    let IdxData::Labels(labels) = load_idx(&lbl_path)? else {
        return Err(Error::Format {
            path: lbl_path,
            reason: "expected a label file".into(),
        });
    };
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Data(format!("label {bad} outside 0..=9 in {}", lbl_path.display())));
    }
    let n = images.shape()[0];
    if n != labels.len() {
        return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
    }
    Dataset::new(images, labels, split)
}

/// Gaussian blobs with unit spread, one per class, centres pairwise 6 apart.
/// Labels are assigned round-robin so classes are balanced within one sample.
pub fn synth_blobs(rng: &mut RngStream, classes: usize, dims: usize, n: usize) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::param("classes", "need at least two classes"));
    }
    if dims == 0 || n == 0 {
        return Err(Error::param("dims", "need at least one dimension and one sample"));
    }
    let sep = 6.0;
    let centre = |k: usize| -> Vec<f64> {
        let mut c = vec![0.0; dims];
        if classes <= dims {
            c[k] = sep / std::f64::consts::SQRT_2;
        } else {
            c[0] = sep * k as f64;
        }
        c
    };
    let centres: Vec<Vec<f64>> = (0..classes).map(centre).collect();
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        data.extend(centres[k].iter().map(|&c| c + rng.standard_normal()));
    }
    Dataset::new(Tensor::new(vec![n, dims], data)?, labels, Split::Train)
}
