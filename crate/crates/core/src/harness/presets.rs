//! Ready-made configurations: the MNIST MLP hyperparameter row and three
//! small models (one per family) sized so every family has a null space on
//! a teleport batch.

use std::path::PathBuf;

use super::config::{DatasetConfig, ExperimentConfig, ModelConfig};
use crate::nn::{Activation, Pooling};
use crate::teleport::TeleportConfig;

fn mnist(dir: Option<PathBuf>, crop: Option<usize>, downsample: usize) -> DatasetConfig {
    DatasetConfig::Mnist {
        dir,
        train_count: None,
        test_count: None,
        crop,
        downsample,
    }
}

fn base(name: &str, model: ModelConfig, dataset: DatasetConfig, teleport: TeleportConfig) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json("{}").expect("empty config parses");
    cfg.name = name.into();
    cfg.model = model;
    cfg.dataset = dataset;
    cfg.teleport = teleport;
    cfg
}

/// MLP with hidden widths `[16, 10]`: primary SGD at 2e-4, teleport
/// η = 0.2 on batches of 32 with CAP 5 during the first five epochs.
pub fn mnist_mlp(dir: Option<PathBuf>) -> ExperimentConfig {
    base(
        "mnist-mlp",
        ModelConfig::Mlp {
            hidden: vec![16, 10],
            activation: Activation::Relu,
        },
        mnist(dir, None, 1),
        TeleportConfig::default(),
    )
}

/// Leaky-relu variant of [`mnist_mlp`] accepted by the symmetry baseline.
pub fn mnist_mlp_leaky(dir: Option<PathBuf>) -> ExperimentConfig {
    let mut cfg = mnist_mlp(dir);
    cfg.name = "mnist-mlp-leaky".into();
    cfg.model = ModelConfig::Mlp {
        hidden: vec![16, 10],
        activation: Activation::LeakyRelu { alpha: 0.1 },
    };
    cfg
}

/// CNN on 8×8 digits (24×24 center crop, 3× downsample) with channels
/// `[4, 8]`. With 16-sample teleport batches only the 33-input head is
/// rank deficient.
pub fn toy_cnn(dir: Option<PathBuf>) -> ExperimentConfig {
    base(
        "toy-cnn",
        ModelConfig::Cnn {
            channels: vec![4, 8],
            kernel: 3,
            stride: 1,
            padding: 1,
            pool: Some(2),
        },
        mnist(dir, Some(24), 3),
        TeleportConfig {
            eta: 3e-3,
            batch_size: 16,
            cap: 40.0,
            ..TeleportConfig::default()
        },
    )
}

/// One-block transformer (2 heads, width 8) reading a 4×4 digit as 16
/// scalar tokens. The input projection has rank two, so the attention
/// projections have large null spaces.
pub fn toy_transformer(dir: Option<PathBuf>) -> ExperimentConfig {
    base(
        "toy-transformer",
        ModelConfig::Transformer {
            d_model: 8,
            heads: 2,
            ff_hidden: 16,
            blocks: 1,
            pooling: Pooling::Mean,
            causal: false,
        },
        mnist(dir, None, 7),
        TeleportConfig {
            eta: 3e-3,
            batch_size: 16,
            cap: 10.0,
            ..TeleportConfig::default()
        },
    )
}
