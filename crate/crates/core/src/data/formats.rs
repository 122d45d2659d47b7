//! IDX (MNIST) and CIFAR binary readers and writers.

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{bail, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Raw IDX image payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => bail!(Format, "IDX header truncated at byte {at}"),
    }
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    parse_idx_images(&fs::read(path)?)
}

pub(crate) fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        bail!(Format, "IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}");
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        bail!(Format, "IDX images have zero-sized dimensions {rows}×{cols}");
    }
    let expected = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        bail!(Format, "IDX image payload is {} bytes, dims {count}×{rows}×{cols} need {expected}", payload.len());
    }
    Ok(IdxImages { count, rows, cols, pixels: payload.to_vec() })
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&fs::read(path)?)
}

pub(crate) fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        bail!(Format, "IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}");
    }
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        bail!(Format, "IDX label payload is {} bytes, header says {count}", payload.len());
    }
    Ok(payload.to_vec())
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        bail!(Shape, "pixel buffer does not match {}×{}×{}", images.count, images.rows, images.cols);
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// Loads an IDX image/label pair as `(N, 1, rows, cols)` in `[0, 1]`.
/// Classes are `0..=max label`; every example is tagged with `split`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let imgs = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if labels.len() != imgs.count {
        bail!(Format, "{} images but {} labels", imgs.count, labels.len());
    }
    let inputs = imgs.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, vec![1, imgs.rows, imgs.cols], labels, classes, vec![split; imgs.count])
}

/// Loads CIFAR binary records (1 label byte + 3072 pixel bytes) as
/// `(N, 3, 32, 32)` in `[0, 1]`.
pub fn load_cifar_bin(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    parse_cifar(&fs::read(path)?, split)
}

pub(crate) fn parse_cifar(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        bail!(Format, "CIFAR file of {} bytes is not a positive multiple of {CIFAR_RECORD}", bytes.len());
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(usize::from(rec[0]));
        inputs.extend(rec[1..].iter().map(|&p| f64::from(p) / 255.0));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, vec![3, 32, 32], labels, classes, vec![split; n])
}

/// Writes CIFAR binary records; `pixels` holds 3072 bytes per label.
pub fn write_cifar_bin(path: impl AsRef<Path>, labels: &[u8], pixels: &[u8]) -> Result<()> {
    if pixels.len() != labels.len() * (CIFAR_RECORD - 1) {
        bail!(Shape, "{} pixel bytes for {} records", pixels.len(), labels.len());
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (l, px) in labels.iter().zip(pixels.chunks_exact(CIFAR_RECORD - 1)) {
        out.push(*l);
        out.extend_from_slice(px);
    }
    fs::write(path, out)?;
    Ok(())
}
