use std::path::Path;

use carprune::{load_cifar10, load_idx, subset, LabeledDataset, Result};
use clap::ValueEnum;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Raw IDX files: `{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
    Mnist,
    /// Binary batches: `data_batch_{1..5}.bin`, `test_batch.bin`.
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

pub fn load_split(kind: DatasetKind, dir: &Path, split: Split) -> Result<LabeledDataset> {
    match kind {
        DatasetKind::Mnist => {
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            load_idx(
                dir.join(format!("{prefix}-images-idx3-ubyte")),
                dir.join(format!("{prefix}-labels-idx1-ubyte")),
            )
        }
        DatasetKind::Cifar10 => {
            let files: Vec<_> = match split {
                Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            };
            load_cifar10(&files)
        }
    }
}

/// Loads a split and optionally draws a stratified subset of it.
pub fn load_subset(
    kind: DatasetKind,
    dir: &Path,
    split: Split,
    size: Option<usize>,
    seed: u64,
) -> Result<LabeledDataset> {
    let data = load_split(kind, dir, split)?;
    match size {
        Some(n) => subset(&data, n, seed),
        None => Ok(data),
    }
}
