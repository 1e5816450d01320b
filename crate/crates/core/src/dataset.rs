// SPDX-License-Identifier: Apache-2.0

//! Dataset readers: IDX (MNIST) and the CIFAR-10 binary format.
//!
//! Files may be stored gzip-compressed; compression is detected from the
//! gzip magic bytes. Pixels are scaled to `[0, 1]`.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tensor: Tensor,
    pub label: Option<u32>,
}

impl Sample {
    pub fn new(tensor: Tensor, label: Option<u32>) -> Self {
        Self { tensor, label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    #[default]
    Idx,
    Cifar10,
}

/// Reads a file fully, inflating it when it is gzip-compressed.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Raw IDX image data: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let mut cur = Cursor::new(bytes);
    let header_err = || Error::Format("idx images: truncated header".into());
    let magic = cur.read_u32::<BigEndian>().map_err(|_| header_err())?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = cur.read_u32::<BigEndian>().map_err(|_| header_err())? as usize;
    let rows = cur.read_u32::<BigEndian>().map_err(|_| header_err())? as usize;
    let cols = cur.read_u32::<BigEndian>().map_err(|_| header_err())? as usize;
    let body = &bytes[16..];
    let want = count * rows * cols;
    if body.len() != want {
        return Err(Error::Format(format!(
            "idx images: header declares {count} images of {rows}x{cols} ({want} bytes), file has {} bytes of pixels",
            body.len()
        )));
    }
    Ok((count, rows, cols, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let mut cur = Cursor::new(bytes);
    let header_err = || Error::Format("idx labels: truncated header".into());
    let magic = cur.read_u32::<BigEndian>().map_err(|_| header_err())?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx labels: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = cur.read_u32::<BigEndian>().map_err(|_| header_err())? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format(format!(
            "idx labels: header declares {count} labels, file has {}",
            body.len()
        )));
    }
    Ok(body)
}

/// Loads aligned images and labels. Each image becomes a `[1, rows, cols]`
/// tensor. Nothing is returned unless both files are complete and agree.
pub fn load_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let image_bytes = read_maybe_gz(images.as_ref())?;
    let label_bytes = read_maybe_gz(labels.as_ref())?;
    let (count, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != count {
        return Err(Error::Format(format!(
            "idx: {count} images but {} labels",
            labels.len()
        )));
    }
    let plane = rows * cols;
    (0..count)
        .map(|i| {
            let data = pixels[i * plane..(i + 1) * plane]
                .iter()
                .map(|p| f64::from(*p) / 255.0)
                .collect();
            Ok(Sample::new(
                Tensor::new(vec![1, rows, cols], data)?,
                Some(u32::from(labels[i])),
            ))
        })
        .collect()
}

/// CIFAR-10 binary batches: records of one label byte followed by 3072
/// channel-major pixel bytes.
pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let bytes = read_maybe_gz(path.as_ref())?;
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
        return Err(Error::Format(format!(
            "cifar10: file size {} is not a positive multiple of {CIFAR10_RECORD}",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR10_RECORD)
        .map(|rec| {
            let data = rec[1..].iter().map(|p| f64::from(*p) / 255.0).collect();
            Ok(Sample::new(Tensor::new(vec![3, 32, 32], data)?, Some(u32::from(rec[0]))))
        })
        .collect()
}

/// Encodes an IDX image file (uncompressed).
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
