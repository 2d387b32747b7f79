//! Dataset loading, synthetic generation, and client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, IdxError, Result};
use crate::model::Batch;
use crate::seed;

/// Labeled samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::invalid("dataset dims and class count must be >= 1"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} >= {num_classes} classes"
            )));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the given rows into a batch, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample index {i} out of range")));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, labels, self.dim)
    }

    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.labels.clone(), self.dim)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let batch = self.batch(indices)?;
        LabeledDataset::new(
            self.name.clone(),
            batch.features().to_vec(),
            batch.labels().to_vec(),
            self.dim,
            self.num_classes,
        )
    }

    /// Splits off the last `tail` samples.
    pub fn split_tail(&self, tail: usize) -> Result<(LabeledDataset, LabeledDataset)> {
        if tail >= self.len() {
            return Err(Error::invalid(format!(
                "cannot hold out {tail} of {} samples",
                self.len()
            )));
        }
        let cut = self.len() - tail;
        let head: Vec<usize> = (0..cut).collect();
        let rest: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&rest)?))
    }
}

/// Decoded IDX container: shape plus raw unsigned-byte payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_UBYTE: u8 = 0x08;

/// Parses an IDX file with unsigned-byte elements.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::TruncatedHeader);
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(IdxError::BadMagic);
    }
    if bytes[2] != IDX_UBYTE {
        return Err(IdxError::UnsupportedType(bytes[2]));
    }
    let ndims = bytes[3] as usize;
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(IdxError::TruncatedHeader);
    }
    let dims: Vec<usize> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(IdxError::SizeMismatch {
            expected: usize::MAX,
            got: bytes.len() - header_len,
        })?;
    let payload = &bytes[header_len..];
    if payload.len() != expected {
        return Err(IdxError::SizeMismatch {
            expected,
            got: payload.len(),
        });
    }
    Ok(IdxTensor {
        dims,
        data: payload.to_vec(),
    })
}

/// Serializes an unsigned-byte tensor in IDX layout. Used to build fixtures.
pub fn encode_idx(tensor: &IdxTensor) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, tensor.dims.len() as u8];
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&tensor.data);
    out
}

fn read_idx(path: &Path) -> Result<IdxTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_idx(&bytes)?)
}

/// Assembles an image/label IDX pair into a dataset with pixels scaled to
/// `[0, 1]`. When `subset` is smaller than the file, a seeded shuffle picks
/// which samples to keep.
pub fn load_idx_pair(
    images: &Path,
    labels: &Path,
    subset: Option<usize>,
    seed: u64,
) -> Result<LabeledDataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if img.dims.len() < 2 {
        return Err(IdxError::Shape(format!(
            "image tensor must have >= 2 dims, got {:?}",
            img.dims
        ))
        .into());
    }
    if lab.dims.len() != 1 {
        return Err(
            IdxError::Shape(format!("label tensor must be 1-d, got {:?}", lab.dims)).into(),
        );
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(IdxError::Shape(format!("{n} images but {} labels", lab.dims[0])).into());
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let dim: usize = img.dims[1..].iter().product();
    let num_classes = 10.max(lab.data.iter().copied().max().unwrap_or(0) as usize + 1);

    let mut order: Vec<usize> = (0..n).collect();
    if let Some(keep) = subset.filter(|&k| k < n) {
        order.shuffle(&mut seed::rng(seed));
        order.truncate(keep);
    }
    let mut features = Vec::with_capacity(order.len() * dim);
    let mut out_labels = Vec::with_capacity(order.len());
    for &i in &order {
        features.extend(
            img.data[i * dim..(i + 1) * dim]
                .iter()
                .map(|&b| b as f64 / 255.0),
        );
        out_labels.push(lab.data[i] as usize);
    }
    let name = images
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    LabeledDataset::new(name, features, out_labels, dim, num_classes)
}

/// Gaussian blobs, one unit-variance cluster per class.
///
/// Class means have Euclidean norm `separation`. When `classes <= d` they sit
/// on distinct coordinate axes; otherwise their directions are drawn at
/// random. Labels are assigned round-robin (counts differ by at most one)
/// and then shuffled.
pub fn synth_classification(
    n: usize,
    d: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || n < classes || d == 0 {
        return Err(Error::invalid(format!(
            "synthetic data needs n >= classes >= 2 and d >= 1 (n={n}, classes={classes}, d={d})"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::invalid("separation must be finite and >= 0"));
    }
    let mut rng = seed::rng(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= d {
                let mut m = vec![0.0; d];
                m[c] = separation;
                m
            } else {
                let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                dir.into_iter().map(|v| v / norm * separation).collect()
            }
        })
        .collect();

    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * d);
    for &y in &labels {
        for &mu in &means[y] {
            let z: f64 = rng.sample(StandardNormal);
            features.push(mu + z);
        }
    }
    LabeledDataset::new(format!("blobs-{classes}x{d}"), features, labels, d, classes)
}

/// Disjoint sample-index lists, one per client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client(&self, id: usize) -> &[usize] {
        &self.assignments[id]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }
}

/// Seeded shuffle followed by contiguous slices whose sizes differ by at most
/// one; the first `n % clients` clients get the extra sample.
pub fn partition_iid(num_samples: usize, clients: usize, seed: u64) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if clients > num_samples {
        return Err(Error::invalid(format!(
            "{clients} clients exceed {num_samples} samples"
        )));
    }
    let mut order: Vec<usize> = (0..num_samples).collect();
    order.shuffle(&mut seed::rng(seed));
    let base = num_samples / clients;
    let extra = num_samples % clients;
    let mut start = 0;
    let assignments = (0..clients)
        .map(|c| {
            let len = base + usize::from(c < extra);
            let slice = order[start..start + len].to_vec();
            start += len;
            slice
        })
        .collect();
    Ok(Partition { assignments })
}
