//! CIFAR-10 binary batches converted to 28×28 greyscale.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::idx::read_bytes;
use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One label byte followed by 32×32 R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + 3 * 1024;
const SIDE: usize = 32;
const CROP: usize = 28;

/// Channel weights for the greyscale conversion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GreyWeights {
    /// `0.30·R + 0.59·G + 0.11·B`.
    #[default]
    Standard,
    /// `0.30·R + 0.11·G + 0.59·B`.
    Alternate,
}

impl GreyWeights {
    pub fn rgb(self) -> [Scalar; 3] {
        match self {
            GreyWeights::Standard => [0.30, 0.59, 0.11],
            GreyWeights::Alternate => [0.30, 0.11, 0.59],
        }
    }
}

/// Converts the 3072 channel bytes of one record into 784 `[0, 1]` pixels:
/// weighted greyscale, then rows and columns `0..28`.
pub fn grey_record(channels: &[u8], weights: GreyWeights) -> Result<Vec<Scalar>> {
    if channels.len() != 3 * SIDE * SIDE {
        return Err(Error::dim(
            "grey_record",
            format!("expected {} channel bytes, got {}", 3 * SIDE * SIDE, channels.len()),
        ));
    }
    let [wr, wg, wb] = weights.rgb();
    let plane = SIDE * SIDE;
    let mut out = Vec::with_capacity(CROP * CROP);
    for r in 0..CROP {
        for c in 0..CROP {
            let k = r * SIDE + c;
            let v = wr * Scalar::from(channels[k])
                + wg * Scalar::from(channels[plane + k])
                + wb * Scalar::from(channels[2 * plane + k]);
            out.push((v / 255.0).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Loads and converts every record of the given batch files, in order.
pub fn load_cifar10_modified(paths: &[impl AsRef<Path>], weights: GreyWeights) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read_bytes(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
                detail: format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
            });
        }
        for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] >= 10 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: (i * CIFAR_RECORD) as u64,
                    detail: format!("label {} outside 0..10", rec[0]),
                });
            }
            labels.push(rec[0] as usize);
            data.extend(grey_record(&rec[1..], weights)?);
        }
    }
    let n = labels.len();
    Dataset::new("cifar10-modified", Tensor::new(n, CROP * CROP, data)?, labels, 10)
}
