//! IDX (MNIST-style) image/label files, optionally gzip-compressed.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use winojoint::{Dataset, Tensor};

use crate::error::{CliError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const CLASSES: usize = 10;

/// Reads a file, transparently inflating it when it starts with the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| CliError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(CliError::Truncated { path: path.into(), expected: need as u64, got: bytes.len() as u64 });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(CliError::BadMagic { path: path.into(), expected: magic, found });
    }
    if bytes.len() < need {
        return Err(CliError::Truncated { path: path.into(), expected: need as u64, got: bytes.len() as u64 });
    }
    Ok((0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect())
}

/// `(count, rows, cols, pixels)` of an images file.
pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let d = header(path, bytes, IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (d[0], d[1], d[2]);
    let need = 16 + n as u64 * rows as u64 * cols as u64;
    if (bytes.len() as u64) < need {
        return Err(CliError::Truncated { path: path.into(), expected: need, got: bytes.len() as u64 });
    }
    Ok((n, rows, cols, bytes[16..need as usize].to_vec()))
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let d = header(path, bytes, LABELS_MAGIC, 1)?;
    let need = 8 + d[0] as u64;
    if (bytes.len() as u64) < need {
        return Err(CliError::Truncated { path: path.into(), expected: need, got: bytes.len() as u64 });
    }
    Ok(bytes[8..need as usize].to_vec())
}

/// Loads an image/label pair as a `N×1×H×W` dataset scaled to `[0, 1]`.
pub fn ingest_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_images(images, &read_maybe_gz(images)?)?;
    let lab = parse_labels(labels, &read_maybe_gz(labels)?)?;
    if lab.len() != n {
        return Err(CliError::CountMismatch { images: n, labels: lab.len() });
    }
    if let Some(bad) = lab.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(CliError::Format(format!("{}: label {bad} out of range", labels.display())));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let t = Tensor::from_vec(&[n, 1, rows, cols], data)?;
    Ok(Dataset::new(t, lab.into_iter().map(usize::from).collect(), CLASSES)?)
}

/// Serialises images and labels in IDX form (used to build fixtures).
pub fn encode_idx(rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut im = Vec::with_capacity(16 + pixels.len());
    im.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for v in [labels.len(), rows, cols] {
        im.extend_from_slice(&(v as u32).to_be_bytes());
    }
    im.extend_from_slice(pixels);
    let mut lb = Vec::with_capacity(8 + labels.len());
    lb.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lb.extend_from_slice(labels);
    (im, lb)
}
