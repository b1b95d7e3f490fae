//! Datasets: a synthetic Gaussian-cluster generator plus readers for the
//! IDX and CIFAR-10 binary formats.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{NapError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Inputs `[n, ...sample_shape]` with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(NapError::shape("Dataset::new", inputs.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(NapError::Index {
                op: "Dataset::new",
                index: bad,
                bound: classes,
            });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Rows `indices` of the inputs.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let w = self.inputs.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Tensor::new(shape, data).expect("gathered rows match shape")
    }
}

/// `n` points in `d` dimensions around `classes` Gaussian centres, with
/// unit total variance per coordinate and balanced, shuffled labels.
pub fn make_synthetic_dataset(n: usize, d: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 || classes == 0 {
        return Err(NapError::Config(format!(
            "synthetic dataset needs n, d, classes >= 1 (got {n}, {d}, {classes})"
        )));
    }
    let mut rng = rng::stream(seed, 0xc1a55);
    let centres = Tensor::randn(&[classes, d], 1.0, &mut rng);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let half = std::f64::consts::FRAC_1_SQRT_2;
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            data.push(half * (centres.get2(y, j) + z));
        }
    }
    Dataset::new(Tensor::new(vec![n, d], data)?, labels, classes)
}

/// A parsed IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    /// Bytes scaled to `[0, 1]`, shape `dims`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.dims.clone(),
            self.data.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .expect("dims checked at parse time")
    }
}

fn format_err(offset: u64, message: impl Into<String>) -> NapError {
    NapError::Format {
        offset,
        message: message.into(),
    }
}

/// Parses an unsigned-byte IDX buffer (magic `0x00000801` for vectors,
/// `0x00000803` for image stacks, or any other dimension count).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len() as u64, "truncated IDX magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(0, format!("bad IDX magic {:02x?}", &bytes[..4])));
    }
    if bytes[2] != 0x08 {
        return Err(format_err(2, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(format_err(3, "IDX with zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(bytes.len() as u64, "truncated IDX dimension table"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|k| {
            let o = 4 + 4 * k;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    if let Some(k) = dims.iter().position(|&n| n == 0) {
        return Err(format_err(4 + 4 * k as u64, "IDX dimension of size zero"));
    }
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected) as u64,
            format!("IDX payload has {} bytes, expected {}", bytes.len() - header, expected - header),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn load_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&std::fs::read(path)?)
}

/// Combines an image file `[n, h, w]` and a label file `[n]` into a
/// dataset with `[n, 1, h, w]` inputs.
pub fn load_idx_dataset(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let img = load_idx(images)?;
    let lab = load_idx(labels)?;
    if img.dims.len() != 3 || lab.dims.len() != 1 {
        return Err(NapError::Config(format!(
            "expected [n,h,w] images and [n] labels, got {:?} and {:?}",
            img.dims, lab.dims
        )));
    }
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    let inputs = img.to_tensor().reshape(&[n, 1, h, w])?;
    Dataset::new(inputs, lab.data.iter().map(|&b| b as usize).collect(), classes)
}

pub const CIFAR_RECORD: usize = 3073;

/// Parses CIFAR-10 binary records: one label byte then 3×32×32 pixels.
pub fn parse_cifar_bin(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(format_err(0, "empty CIFAR file"));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(format_err(
            whole as u64,
            format!("trailing partial record of {} bytes", bytes.len() - whole),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(format_err(
                (i * CIFAR_RECORD) as u64,
                format!("label {} out of range", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10)
}

pub fn load_cifar_bin(path: &Path) -> Result<Dataset> {
    parse_cifar_bin(&std::fs::read(path)?)
}
