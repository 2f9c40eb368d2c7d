//! Training and evaluation, checkpoints, the feature-image wire format and
//! the edge/cloud stream harness.

mod checkpoint;
mod config;
mod data;
mod grid;
mod metrics;
mod stream;
mod train;
mod wire;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
};
pub use config::{ClassifierConfig, DataConfig, IoConfig, RunConfig, TrainConfig};
pub use data::{load_data, to_batch, PreparedData};
pub use grid::{ablation_preset, run_experiment_grid, table_one_preset, write_grid_csv, GridCell, GridRow};
pub use metrics::{confusion_matrix, evaluate_classifier, evaluate_reconstruction, Db, MetricsReport};
pub use stream::{
    channel_pair, cloud_decode_stream, edge_encode_stream, ChannelSink, ChannelSource, DecodeOutcome, StreamStats,
};
pub use train::{cosine_lr, train_autoencoder, train_classifier, ClassifierOutcome, TrainOutcome};
pub use wire::{
    deserialize_feature_image, serialize_feature_image, FeatureImageReader, WIRE_HEADER_LEN, WIRE_MAGIC, WIRE_VERSION,
};

use thiserror::Error;

use crate::csiprep::PrepError;
use crate::model::ModelError;
use crate::syndata::SynthError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("checkpoint or record built for config {found:#018x}, expected {expected:#018x}")]
    IncompatibleCheckpoint { expected: u64, found: u64 },
    #[error("training aborted at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error("stream write failed after {} frames: {source}", stats.frames_sent)]
    StreamWrite {
        stats: StreamStats,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::IncompatibleCheckpoint { expected, found } => Self::IncompatibleCheckpoint { expected, found },
            other => Self::Model(other),
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
