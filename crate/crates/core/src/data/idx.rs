//! Big-endian IDX files: magic 2051 for `u8` image cubes, 2049 for `u8`
//! label vectors.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{pixel, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const N_CLS: usize = 10;

/// Reads a file, inflating it when the name ends in `.gz`.
pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, bytes.len(), "truncated header"))
}

/// Parses an image file into `(rows, cols, N×(rows·cols) pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Tensor)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(path, 0, format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(format_err(path, bytes.len(), format!("truncated: {n} images need {need} bytes")));
    }
    if bytes.len() > need {
        return Err(format_err(path, need, "trailing bytes after last image"));
    }
    let data = bytes[16..].iter().map(|&b| pixel(b)).collect();
    Ok((rows, cols, Tensor::new(n, rows * cols, data)?))
}

/// Parses a label file; every label must be below 10.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(format_err(path, 0, format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(format_err(path, bytes.len(), format!("truncated: {n} labels need {need} bytes")));
    }
    if bytes.len() > need {
        return Err(format_err(path, need, "trailing bytes after last label"));
    }
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (b as usize) < N_CLS {
                Ok(b as usize)
            } else {
                Err(format_err(path, 8 + i, format!("label {b} outside 0..{N_CLS}")))
            }
        })
        .collect()
}

/// Loads an image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (_, _, images) = parse_idx_images(&read_bytes(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_bytes(labels_path)?, labels_path)?;
    if images.rows() != labels.len() {
        return Err(format_err(
            labels_path,
            4,
            format!("{} labels for {} images", labels.len(), images.rows()),
        ));
    }
    let name = images_path
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, images, labels, N_CLS)
}

#[cfg(test)]
pub(crate) fn encode_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
pub(crate) fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
