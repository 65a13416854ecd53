//! Labeled datasets: MNIST IDX parsing, synthetic Gaussian blobs, stratified
//! splits and seeded minibatching.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;

/// Inputs in `[0, 1]^n` with labels in `0..k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    k: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, k: usize) -> Result<Self> {
        if !inputs.is_matrix() {
            return Err(Error::Shape("dataset inputs must be N x n".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::CountMismatch { images: inputs.rows(), labels: labels.len() });
        }
        if let Some(v) = inputs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("input value {v} outside [0, 1]")));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!("label {y} not below class count {k}")));
        }
        Ok(Self { inputs, labels, k })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Members at `indices`, in that order. `indices` must be nonempty.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            k: self.k,
        }
    }

    /// First `n` members (or all of them).
    pub fn take(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        self.labels.iter().for_each(|&y| c[y] += 1);
        c
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |_| Error::Format(format!("{what} truncated"))
}

/// Decodes an IDX3 image file into rows of pixels scaled by `1/255`.
pub fn decode_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.read_u32::<BigEndian>().map_err(truncated("image header"))?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!("image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = cur.read_u32::<BigEndian>().map_err(truncated("image header"))? as usize;
    }
    let [count, rows, cols] = dims;
    let pixels = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * pixels {
        return Err(Error::Format(format!(
            "image data truncated: {} bytes for {count} images of {rows}x{cols}",
            body.len()
        )));
    }
    let data = body[..count * pixels].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((count, pixels, data))
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.read_u32::<BigEndian>().map_err(truncated("label header"))?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!("label magic {magic:#010x}, expected {IDX_LABEL_MAGIC}")));
    }
    let count = cur.read_u32::<BigEndian>().map_err(truncated("label header"))? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format(format!("label data truncated: {} of {count}", body.len())));
    }
    Ok(body[..count].iter().map(|&b| usize::from(b)).collect())
}

/// Parses an MNIST-style image/label file pair. `k` is `1 + max label`.
pub fn parse_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (count, pixels, data) = decode_idx_images(&read_all(images_path.as_ref())?)?;
    let labels = decode_idx_labels(&read_all(labels_path.as_ref())?)?;
    if count != labels.len() {
        return Err(Error::CountMismatch { images: count, labels: labels.len() });
    }
    if count == 0 {
        return Err(Error::Format("empty IDX file".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1).max(2);
    LabeledDataset::new(Tensor::matrix(count, pixels, data)?, labels, k)
}

/// Loads `train-*` or `t10k-*` IDX files from an MNIST directory with the
/// standard file names.
pub fn load_mnist(dir: impl AsRef<Path>, train: bool) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let prefix = if train { "train" } else { "t10k" };
    let mut ds = parse_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.k = 10;
    Ok(ds)
}

/// Block one-hot anchor of class `c`, mapped into `[0.25, 0.75]`.
pub fn blob_anchor(k: usize, dim: usize, c: usize) -> Vec<f64> {
    let width = dim / k;
    (0..dim)
        .map(|j| if j / width == c && j < k * width { 0.75 } else { 0.25 })
        .collect()
}

/// `per_class` points per class around [`blob_anchor`] with Gaussian noise
/// of standard deviation `spread`, clamped to `[0, 1]`. Requires `dim >= k`
/// so that every class owns at least one anchor coordinate.
pub fn synth_blobs(k: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if k < 2 || dim < 2 {
        return Err(Error::InvalidArgument(format!("need k >= 2 and dim >= 2, got k={k} dim={dim}")));
    }
    if dim < k {
        return Err(Error::InvalidArgument(format!("dim {dim} smaller than class count {k}")));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("spread {spread} must be non-negative")));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, spread).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(k * per_class * dim);
    let mut labels = Vec::with_capacity(k * per_class);
    for c in 0..k {
        let anchor = blob_anchor(k, dim, c);
        for _ in 0..per_class {
            data.extend(anchor.iter().map(|a| (a + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::matrix(k * per_class, dim, data)?, labels, k)
}

/// Stratified, seeded partition. Within each class the members are shuffled
/// and cut at `round(cumulative_fraction * class_size)`; partitions keep the
/// original member order.
pub fn split_dataset(d: &LabeledDataset, fractions: &[f64], seed: u64) -> Result<Vec<LabeledDataset>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::InvalidArgument(format!("fractions must be positive: {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::InvalidArgument(format!("fractions sum to {total} > 1")));
    }
    let mut rng = seed::rng(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for c in 0..d.k {
        let mut members: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == c).collect();
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let mut start = 0;
        let mut cum = 0.0;
        for (p, f) in fractions.iter().enumerate() {
            cum += f;
            let end = ((cum.min(1.0) * n).round() as usize).min(members.len());
            parts[p].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    parts
        .into_iter()
        .enumerate()
        .map(|(p, mut idx)| {
            if idx.is_empty() {
                return Err(Error::Empty(format!("partition {p} received no members")));
            }
            idx.sort_unstable();
            Ok(d.subset(&idx))
        })
        .collect()
}

/// Index batches of a seeded permutation of `0..n`; the last may be short.
pub fn minibatch_indices(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn iterate_minibatches(d: &LabeledDataset, batch_size: usize, seed: u64) -> Result<Vec<LabeledDataset>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    Ok(minibatch_indices(d.len(), batch_size, seed).iter().map(|b| d.subset(b)).collect())
}
