//! Named, versioned architectures. A preset's layer list never changes once
//! published; a changed architecture gets a new version suffix.

use carprune::{LayerSpec, Network, Result};
use clap::ValueEnum;
use serde::Serialize;

use crate::datasets::DatasetKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// conv 8x5x5, pool, conv 16x5x5, pool, dense 10 on 1x28x28.
    LenetMnist,
    /// Same shape with 4 and 6 filters; small enough for brute-force oracles.
    ToyMnist,
    /// conv 8x5x5, pool, conv 16x5x5, pool, dense 10 on 3x32x32.
    LenetCifar,
}

impl Preset {
    pub fn id(self) -> &'static str {
        match self {
            Preset::LenetMnist => "lenet-mnist@1",
            Preset::ToyMnist => "toy-mnist@1",
            Preset::LenetCifar => "lenet-cifar@1",
        }
    }

    pub fn dataset(self) -> DatasetKind {
        match self {
            Preset::LenetMnist | Preset::ToyMnist => DatasetKind::Mnist,
            Preset::LenetCifar => DatasetKind::Cifar10,
        }
    }

    pub fn input_shape(self) -> Vec<usize> {
        match self.dataset() {
            DatasetKind::Mnist => vec![1, 28, 28],
            DatasetKind::Cifar10 => vec![3, 32, 32],
        }
    }

    pub fn layers(self) -> Vec<LayerSpec> {
        let (c, f1, f2, side) = match self {
            Preset::LenetMnist => (1, 8, 16, 4),
            Preset::ToyMnist => (1, 4, 6, 4),
            Preset::LenetCifar => (3, 8, 16, 5),
        };
        vec![
            LayerSpec::conv(f1, c, 5),
            LayerSpec::Relu,
            LayerSpec::maxpool(2),
            LayerSpec::conv(f2, f1, 5),
            LayerSpec::Relu,
            LayerSpec::maxpool(2),
            LayerSpec::Flatten,
            LayerSpec::dense(10, f2 * side * side),
            LayerSpec::Softmax,
        ]
    }

    pub fn build(self, seed: u64) -> Result<Network> {
        Network::init(self.input_shape(), self.layers(), seed)
    }
}
