//! Experiment configuration: a single JSON document with defaults for every
//! omitted field. The resolved form is echoed into each run's manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Targets};
use crate::error::{Error, Result};
use crate::metrics::ClockMode;
use crate::nn::{Activation, CnnSpec, MlpSpec, ModelGraph, Pooling, TransformerSpec};
use crate::objectives::LossKind;
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng::SeededRng;
use crate::symmetry::ProbeDims;
use crate::teleport::{TeleportConfig, TrainConfig};

/// RNG stream for weight initialization.
pub const INIT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "relu")]
        activation: Activation,
    },
    Cnn {
        channels: Vec<usize>,
        #[serde(default = "three")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "one")]
        padding: usize,
        #[serde(default = "two")]
        pool: Option<usize>,
    },
    Transformer {
        d_model: usize,
        heads: usize,
        ff_hidden: usize,
        #[serde(default = "one")]
        blocks: usize,
        #[serde(default)]
        pooling: Pooling,
        #[serde(default)]
        causal: bool,
    },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp {
            hidden: vec![16, 10],
            activation: Activation::Relu,
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Mnist {
            dir: None,
            train_count: None,
            test_count: None,
            crop: None,
            downsample: 1,
        }
    }
}

fn relu() -> Activation {
    Activation::Relu
}

fn one() -> usize {
    1
}

fn two() -> Option<usize> {
    Some(2)
}

fn three() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// IDX files in MNIST layout; `dir` defaults to
    /// `$NULLPORT_DATA_DIR/mnist-subset`.
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default)]
        train_count: Option<usize>,
        #[serde(default)]
        test_count: Option<usize>,
        #[serde(default)]
        crop: Option<usize>,
        #[serde(default = "one")]
        downsample: usize,
    },
    SyntheticSeries {
        dims: usize,
        length: usize,
        window: usize,
        horizon: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 2e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub base: ProbeDims,
    pub t: Vec<usize>,
    pub d: Vec<usize>,
    pub n: Vec<usize>,
    pub l: Vec<usize>,
    pub b: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            base: ProbeDims {
                t: 2,
                d: 256,
                n: 32,
                l: 3,
                b: 4,
            },
            t: vec![1, 2, 4, 8],
            d: vec![64, 128, 256, 512],
            n: vec![8, 16, 32, 64],
            l: vec![2, 3, 4, 6],
            b: vec![1, 4, 16, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorControlConfig {
    pub taus: Vec<f64>,
    /// Primary epochs run before the snapshot is taken.
    pub pretrain_epochs: usize,
}

impl Default for ErrorControlConfig {
    fn default() -> Self {
        ErrorControlConfig {
            taus: vec![1.0, 0.999, 0.99, 0.9],
            pretrain_epochs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Defaults to cross-entropy for class targets and mse otherwise.
    #[serde(default)]
    pub loss: Option<LossKind>,
    #[serde(default)]
    pub teleport: TeleportConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seed for dataset subsetting and synthetic series, shared by all runs.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub error_control: ErrorControlConfig,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_epochs() -> usize {
    30
}

fn default_batch_size() -> usize {
    32
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// Train and optional test split in model-ready form.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn is_classification(&self) -> bool {
        matches!(self.dataset, DatasetConfig::Mnist { .. })
    }

    /// Fills every defaulted choice and checks cross-field constraints.
    pub fn resolve(mut self) -> Result<Self> {
        let natural = if self.is_classification() {
            LossKind::CrossEntropy
        } else {
            LossKind::Mse
        };
        match self.loss {
            None => self.loss = Some(natural),
            Some(l) if l != natural => {
                return Err(Error::Config(format!("loss {l:?} does not fit the dataset targets")));
            }
            _ => {}
        }
        if let DatasetConfig::Mnist { dir: dir @ None, .. } = &mut self.dataset {
            *dir = Some(data::data_dir().join("mnist-subset"));
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.teleport.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr >= 0.0) {
            return bad("optimizer lr must be finite and >= 0");
        }
        match &self.model {
            ModelConfig::Mlp { hidden, .. } if hidden.contains(&0) => return bad("MLP hidden widths must be positive"),
            ModelConfig::Cnn { channels, .. } if channels.is_empty() => return bad("CNN needs at least one conv layer"),
            ModelConfig::Cnn { .. } if !self.is_classification() => return bad("CNN models need an image dataset"),
            ModelConfig::Transformer { d_model, heads, .. } if *heads == 0 || d_model % heads != 0 => {
                return bad("transformer d_model must be divisible by heads")
            }
            _ => {}
        }
        if let DatasetConfig::SyntheticSeries { length, window, horizon, test_fraction, .. } = &self.dataset {
            if length < &(window + horizon) {
                return bad("series length must be at least window + horizon");
            }
            if !(0.0..1.0).contains(test_fraction) {
                return bad("test_fraction must lie in [0, 1)");
            }
        }
        for v in &self.error_control.taus {
            if !(0.0..=1.0).contains(v) {
                return bad("error-control taus must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss.unwrap_or(if self.is_classification() {
            LossKind::CrossEntropy
        } else {
            LossKind::Mse
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            clock: self.clock,
        }
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        OptimizerState::new(self.optimizer.kind, self.optimizer.lr)
    }

    /// Loads and shapes the data for the configured model family.
    pub fn load_splits(&self) -> Result<Splits> {
        match &self.dataset {
            DatasetConfig::Mnist {
                dir,
                train_count,
                test_count,
                crop,
                downsample,
            } => {
                let dir = dir.clone().unwrap_or_else(|| data::data_dir().join("mnist-subset"));
                let (mut train, mut test) = data::load_mnist_dir(&dir)?;
                let mut rng = SeededRng::new(self.data_seed);
                if let Some(c) = train_count {
                    train = data::subset(&train, *c, &mut rng)?;
                }
                if let Some(c) = test_count {
                    test = data::subset(&test, *c, &mut rng)?;
                }
                let shape = |ds: data::ImageDataset| -> Result<Dataset> {
                    let ds = match crop {
                        Some(c) => data::center_crop(&ds, *c)?,
                        None => ds,
                    };
                    let ds = if *downsample > 1 {
                        data::downsample_images(&ds, *downsample)?
                    } else {
                        ds
                    };
                    match self.model {
                        ModelConfig::Mlp { .. } => data::flatten_for_mlp(&ds),
                        ModelConfig::Cnn { .. } => ds.into_dataset(),
                        ModelConfig::Transformer { .. } => data::to_sequence(&ds)?.into_dataset(),
                    }
                };
                let test = if test.is_empty() { None } else { Some(shape(test)?) };
                Ok(Splits {
                    train: shape(train)?,
                    test,
                })
            }
            DatasetConfig::SyntheticSeries {
                dims,
                length,
                window,
                horizon,
                test_fraction,
            } => {
                let mut rng = SeededRng::new(self.data_seed);
                let seq = data::synth_timeseries_windows(&mut rng, *dims, *length, *window, *horizon)?;
                let ds = seq.into_dataset()?;
                let ds = match self.model {
                    ModelConfig::Mlp { .. } => {
                        let n = ds.len();
                        let flat = ds.inputs.len() / n.max(1);
                        Dataset::new(ds.name.clone(), ds.inputs.reshape(&[n, flat])?, ds.targets)?
                    }
                    _ => ds,
                };
                // Chronological split: the test windows come last.
                let n_test = ((ds.len() as f64) * test_fraction).floor() as usize;
                let n_train = ds.len() - n_test;
                let train = ds.batch(&(0..n_train).collect::<Vec<_>>());
                let test = ds.batch(&(n_train..ds.len()).collect::<Vec<_>>());
                let wrap = |b: crate::data::Batch, split: &str| Dataset::new(format!("{}-{split}", ds.name), b.inputs, b.targets);
                Ok(Splits {
                    train: wrap(train, "train")?,
                    test: if n_test > 0 { Some(wrap(test, "test")?) } else { None },
                })
            }
        }
    }

    /// Builds a freshly initialized model sized for `train`.
    pub fn build_model(&self, train: &Dataset, seed: u64) -> Result<ModelGraph> {
        let mut rng = SeededRng::with_stream(seed, INIT_STREAM);
        let outputs = match &train.targets {
            Targets::Classes { classes, .. } => *classes,
            Targets::Values(t) => t.shape()[1..].iter().product(),
        };
        let shape = train.sample_shape();
        match &self.model {
            ModelConfig::Mlp { hidden, activation } => MlpSpec {
                input_dim: shape.iter().product(),
                hidden: hidden.clone(),
                output_dim: outputs,
                activation: *activation,
            }
            .build(&mut rng),
            ModelConfig::Cnn {
                channels,
                kernel,
                stride,
                padding,
                pool,
            } => {
                if shape.len() != 3 {
                    return Err(Error::Config("CNN models need image-shaped inputs".into()));
                }
                CnnSpec {
                    in_channels: shape[0],
                    height: shape[1],
                    width: shape[2],
                    channels: channels.clone(),
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                    pool: *pool,
                    classes: outputs,
                }
                .build(&mut rng)
            }
            ModelConfig::Transformer {
                d_model,
                heads,
                ff_hidden,
                blocks,
                pooling,
                causal,
            } => {
                if shape.len() != 2 {
                    return Err(Error::Config("transformer models need token sequences".into()));
                }
                TransformerSpec {
                    tokens: shape[0],
                    d_in: shape[1],
                    d_model: *d_model,
                    heads: *heads,
                    ff_hidden: *ff_hidden,
                    blocks: *blocks,
                    outputs,
                    pooling: *pooling,
                    causal: *causal,
                }
                .build(&mut rng)
            }
        }
    }
}
