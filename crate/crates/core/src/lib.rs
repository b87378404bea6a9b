//! Null-space gradient-projection teleportation for small neural networks.
//!
//! A teleport moves the weights along directions that leave the loss on a
//! batch unchanged while increasing the gradient norm. Each weight's
//! gradient step is projected onto the orthogonal complement of the span of
//! that layer's batch inputs, so `ΔW·X = 0` layer by layer.

pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod projection;
pub mod rng;
pub mod svd;
pub mod symmetry;
pub mod teleport;
pub mod tensor;

pub use data::{Batch, BatchIterator, Dataset, ImageDataset, SequenceDataset, Targets};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, ModelConfig, DatasetConfig};
pub use metrics::{ClockMode, MetricRow};
pub use nn::{Activation, CnnSpec, ForwardTrace, MlpSpec, ModelGraph, Pooling, TransformerSpec};
pub use objectives::{primary_gradient, teleport_gradient, LossKind};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{grad_norm_sq, GradientSet, ParamId, Params, Slot};
pub use projection::{build_all_bases, project, select_rank, BasisMap, CoreBasis, Side};
pub use rng::SeededRng;
pub use svd::{thin_svd, SvdFactors};
pub use teleport::{run_teleport_for_epoch, train_with_teleport, TeleportConfig, TeleportReport, TrainConfig};
pub use tensor::Tensor;
