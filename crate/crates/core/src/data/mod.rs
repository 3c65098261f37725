//! Datasets, loaders and batch sampling.
//!
//! Image datasets are stored as `N×784` matrices of `[0, 1]` pixels. Files are
//! read from a data directory laid out as
//!
//! ```text
//! <dir>/mnist/train-images-idx3-ubyte[.gz]
//! <dir>/mnist/train-labels-idx1-ubyte[.gz]
//! <dir>/fashion-mnist/...        (same names)
//! <dir>/kmnist/...               (same names)
//! <dir>/cifar-10-batches-bin/data_batch_{1..5}.bin
//! ```

mod cifar;
mod idx;
mod sampler;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use cifar::{grey_record, load_cifar10_modified, GreyWeights, CIFAR_RECORD};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use sampler::BatchSampler;
pub use synth::synth_blobs;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "MTL2L_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_cls: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, n_cls: usize) -> Result<Self> {
        let name = name.into();
        if images.rows() != labels.len() {
            return Err(Error::Input(format!(
                "{name}: {} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_cls) {
            return Err(Error::Input(format!("{name}: label {bad} outside 0..{n_cls}")));
        }
        Ok(Self {
            name,
            images,
            labels,
            n_cls,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.images.cols()
    }

    /// The first `k` examples (all of them when `k` exceeds the size).
    pub fn subset(&self, k: usize) -> Self {
        let k = k.min(self.len());
        let d = self.d_in();
        Self {
            name: self.name.clone(),
            images: Tensor::new(k, d, self.images.data()[..k * d].to_vec()).expect("prefix shape"),
            labels: self.labels[..k].to_vec(),
            n_cls: self.n_cls,
        }
    }

    /// Gathers the listed examples into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.d_in();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.row_slice(i));
            labels.push(self.labels[i]);
        }
        (Tensor::new(indices.len(), d, data).expect("gather shape"), labels)
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_cls];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Kmnist,
    Cifar10Modified,
    Blobs,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
            DatasetName::Kmnist => "kmnist",
            DatasetName::Cifar10Modified => "cifar10-modified",
            DatasetName::Blobs => "blobs",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "mnist" => DatasetName::Mnist,
            "fashion-mnist" | "fmnist" | "fashion" => DatasetName::FashionMnist,
            "kmnist" => DatasetName::Kmnist,
            "cifar10-modified" | "cifar10" | "cifar" => DatasetName::Cifar10Modified,
            "blobs" => DatasetName::Blobs,
            other => return Err(Error::Config(format!("unknown dataset `{other}`"))),
        })
    }
}

/// `explicit`, else `$MTL2L_DATA_DIR`, else `./data`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => PathBuf::from("data"),
    }
}

const IDX_IMAGES: &str = "train-images-idx3-ubyte";
const IDX_LABELS: &str = "train-labels-idx1-ubyte";
const CIFAR_DIR: &str = "cifar-10-batches-bin";

/// Paths a named dataset reads, with `.gz` variants substituted when only the
/// compressed file exists.
pub fn dataset_files(name: DatasetName, dir: &Path) -> Vec<PathBuf> {
    let pick = |base: PathBuf| -> PathBuf {
        let gz = base.with_file_name(format!("{}.gz", base.file_name().unwrap().to_string_lossy()));
        if !base.exists() && gz.exists() {
            gz
        } else {
            base
        }
    };
    match name {
        DatasetName::Mnist | DatasetName::FashionMnist | DatasetName::Kmnist => {
            let d = dir.join(name.as_str());
            vec![pick(d.join(IDX_IMAGES)), pick(d.join(IDX_LABELS))]
        }
        DatasetName::Cifar10Modified => (1..=5)
            .map(|i| dir.join(CIFAR_DIR).join(format!("data_batch_{i}.bin")))
            .collect(),
        DatasetName::Blobs => Vec::new(),
    }
}

/// Files a dataset needs that are not present.
pub fn missing_files(name: DatasetName, dir: &Path) -> Vec<PathBuf> {
    dataset_files(name, dir).into_iter().filter(|p| !p.is_file()).collect()
}

/// Loads a named image dataset, keeping the first `subset` examples if given.
pub fn load_named(name: DatasetName, dir: &Path, subset: Option<usize>, grey: GreyWeights) -> Result<Dataset> {
    let missing = missing_files(name, dir);
    if !missing.is_empty() {
        return Err(Error::MissingData(missing));
    }
    let files = dataset_files(name, dir);
    let mut ds = match name {
        DatasetName::Mnist | DatasetName::FashionMnist | DatasetName::Kmnist => {
            let mut ds = load_idx(&files[0], &files[1])?;
            ds.name = name.as_str().to_string();
            ds
        }
        DatasetName::Cifar10Modified => load_cifar10_modified(&files, grey)?,
        DatasetName::Blobs => return Err(Error::Config("blobs are synthesised, not loaded".into())),
    };
    if let Some(k) = subset {
        ds = ds.subset(k);
    }
    Ok(ds)
}

/// Maps a byte to `[0, 1]`.
pub(crate) fn pixel(b: u8) -> Scalar {
    Scalar::from(b) / 255.0
}
