//! Dataset loaders: seeded Gaussian mixtures, CSV tables and IDX files.

use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::DenseMatrix;
use crate::models::{Batch, Targets};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("label {label} at row {row} is outside [0, {classes})")]
    LabelOutOfRange { row: usize, label: i64, classes: usize },
    #[error("invalid dataset settings: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn parse_err(offset: u64, message: impl Into<String>) -> DataError {
    DataError::Parse { offset, message: message.into() }
}

/// Gaussian-mixture classification: class means are drawn from
/// `N(0, separation²·I)` and each point adds unit-variance noise.
/// Labels cycle through the classes before a seeded shuffle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSpec {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub seed: u64,
}

pub fn synthetic_mixture(spec: &MixtureSpec) -> Result<Batch, DataError> {
    if spec.samples == 0 || spec.dim == 0 || spec.classes < 2 {
        return Err(DataError::Invalid(format!(
            "need samples ≥ 1, dim ≥ 1, classes ≥ 2 (got {}, {}, {})",
            spec.samples, spec.dim, spec.classes
        )));
    }
    if !(spec.separation.is_finite() && spec.separation >= 0.0) {
        return Err(DataError::Invalid(format!("separation must be finite and ≥ 0, got {}", spec.separation)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let means: Vec<Vec<f64>> =
        (0..spec.classes).map(|_| (0..spec.dim).map(|_| spec.separation * normal()).collect()).collect();
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    let mut values = Vec::with_capacity(spec.samples * spec.dim);
    for &c in &labels {
        values.extend(means[c].iter().map(|m| m + normal()));
    }
    let inputs = DenseMatrix::from_row_slice(spec.samples, spec.dim, &values);
    let mut order: Vec<usize> = (0..spec.samples).collect();
    order.shuffle(&mut rng);
    labels = order.iter().map(|&i| labels[i]).collect();
    let inputs = inputs.select_rows(order.iter());
    Ok(Batch::new(inputs, Targets::Classes(labels)).expect("rows and labels agree"))
}

/// SHA-256 over the little-endian inputs followed by the targets.
pub fn checksum(batch: &Batch) -> String {
    let mut h = Sha256::new();
    for r in 0..batch.inputs.nrows() {
        for v in batch.inputs.row(r).iter() {
            h.update(v.to_le_bytes());
        }
    }
    match &batch.targets {
        Targets::Classes(c) => c.iter().for_each(|&l| h.update((l as u64).to_le_bytes())),
        Targets::Values(v) => v.iter().for_each(|x| h.update(x.to_le_bytes())),
    }
    hex::encode(h.finalize())
}

/// Headerless CSV of numeric features with the integer label in the last column.
pub fn load_csv(path: &Path, classes: usize) -> Result<Batch, DataError> {
    read_csv(File::open(path)?, classes)
}

pub fn read_csv<R: Read>(input: R, classes: usize) -> Result<Batch, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte());
            parse_err(offset, e.to_string())
        })?;
        let offset = record.position().map_or(0, |p| p.byte());
        if record.len() < 2 {
            return Err(parse_err(offset, "need at least one feature and a label"));
        }
        let features = record.len() - 1;
        if *width.get_or_insert(features) != features {
            return Err(parse_err(offset, format!("row {row} has {features} features, expected {}", width.unwrap())));
        }
        for field in record.iter().take(features) {
            let v: f64 = field.parse().map_err(|_| parse_err(offset, format!("bad number {field:?}")))?;
            values.push(v);
        }
        let raw = &record[features];
        let label: i64 = raw.parse().map_err(|_| parse_err(offset, format!("bad label {raw:?}")))?;
        if label < 0 || label as usize >= classes {
            return Err(DataError::LabelOutOfRange { row, label, classes });
        }
        labels.push(label as usize);
    }
    let width = width.ok_or_else(|| parse_err(0, "no rows"))?;
    let inputs = DenseMatrix::from_row_slice(labels.len(), width, &values);
    Ok(Batch::new(inputs, Targets::Classes(labels)).expect("rows and labels agree"))
}

const IDX_UBYTE_LABELS: u32 = 0x0000_0801;
const IDX_UBYTE_IMAGES: u32 = 0x0000_0803;

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| parse_err(at as u64, "truncated header"))
}

/// Unsigned-byte IDX image and label files; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Batch, DataError> {
    let mut img = Vec::new();
    File::open(images)?.read_to_end(&mut img)?;
    let mut lab = Vec::new();
    File::open(labels)?.read_to_end(&mut lab)?;
    parse_idx(&img, &lab, classes)
}

pub fn parse_idx(images: &[u8], labels: &[u8], classes: usize) -> Result<Batch, DataError> {
    let magic = read_u32(images, 0)?;
    if magic != IDX_UBYTE_IMAGES {
        return Err(parse_err(0, format!("image magic {magic:#010x}, expected {IDX_UBYTE_IMAGES:#010x}")));
    }
    let magic = read_u32(labels, 0)?;
    if magic != IDX_UBYTE_LABELS {
        return Err(parse_err(0, format!("label magic {magic:#010x}, expected {IDX_UBYTE_LABELS:#010x}")));
    }
    let n = read_u32(images, 4)? as usize;
    let rows = read_u32(images, 8)? as usize;
    let cols = read_u32(images, 12)? as usize;
    let n_labels = read_u32(labels, 4)? as usize;
    if n_labels != n {
        return Err(parse_err(4, format!("{n_labels} labels for {n} images")));
    }
    let width = rows * cols;
    let pixels = images.get(16..16 + n * width).ok_or_else(|| parse_err(images.len() as u64, "truncated images"))?;
    let raw_labels = labels.get(8..8 + n).ok_or_else(|| parse_err(labels.len() as u64, "truncated labels"))?;
    let mut targets = Vec::with_capacity(n);
    for (row, &l) in raw_labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(DataError::LabelOutOfRange { row, label: l as i64, classes });
        }
        targets.push(l as usize);
    }
    let values: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = DenseMatrix::from_row_slice(n, width, &values);
    Ok(Batch::new(inputs, Targets::Classes(targets)).expect("rows and labels agree"))
}
