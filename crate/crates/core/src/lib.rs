//! A self-contained channel-pruning laboratory for small CNNs.
//!
//! The crate trains small convolutional networks, scores their channels
//! with five constituent saliency metrics, composes the metrics through an
//! oracle that directly measures per-channel loss sensitivity, and runs an
//! iterative one-channel-at-a-time pruning scheme without fine-tuning,
//! recording accuracy-versus-sparsity trajectories.

pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod network;
pub mod ops;
pub mod oracle;
pub mod pruning;
pub mod saliency;
pub mod tensor;
pub mod train;

pub use data::{Batch, DatasetSplits, SplitData, ValidationSample};
pub use error::{Error, Result};
pub use graph::{ForwardRecord, GradRecord, Plan};
pub use network::{
    ChannelId, ChannelParamSet, ConvWeightStats, LayerSpec, NetworkDef, TensorId, WeightStore,
};
pub use oracle::{CandidateSet, OracleConfig, SensitivityRecord};
pub use pruning::{PruneConfig, PruneTrajectory, SelectionRule, StepRecord};
pub use saliency::{MetricKind, SaliencyVector};
pub use tensor::{PassCounter, Tensor};
pub use train::{TrainConfig, TrainHistory};
