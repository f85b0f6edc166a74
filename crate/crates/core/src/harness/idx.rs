//! IDX container files (the MNIST format): big-endian headers, unsigned-byte data.

use std::path::Path;

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Dataset("IDX header truncated".into()))
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Dataset(format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Dataset("IDX image dimensions overflow".into()))?;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::Dataset(format!(
            "IDX image payload has {} bytes, header promises {need}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Dataset(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Dataset(format!(
            "IDX label payload has {} bytes, header promises {n}",
            body.len()
        )));
    }
    Ok(body)
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from in-memory IDX image and label files. Samples have
/// shape `(rows, cols, 1)` with pixels scaled to `[0, 1]`.
pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Dataset(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Dataset("IDX file holds no images".into()));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Ok(Dataset {
        inputs: Tensor::new(vec![n, rows, cols, 1], data)?,
        labels,
        n_classes,
        source: "idx".into(),
    })
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let mut d = dataset_from_idx(&std::fs::read(ip)?, &std::fs::read(lp)?)?;
    d.source = format!("idx({}, {})", ip.display(), lp.display());
    Ok(d)
}
