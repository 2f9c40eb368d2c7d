//! The SwinFi encoder, decoder and classifier head, losses, and the
//! compression-ratio and complexity formulas.

mod block;
mod config;
mod layers;
mod loss;
mod resample;
mod swinfi;
pub mod window;

pub use block::{swin_block, w_msa, BlockParams};
pub use config::{complexity_estimate, compression_ratio, table_one, ComplexityReport, ModelConfig, StageGeometry};
pub use layers::{Linear, Norm, INIT_STD, LN_EPS};
pub use loss::{nmse_db, nmse_loss, nmse_ratio, NMSE_DB_NEG_INF};
pub use resample::{patch_embed, patch_merge, patch_split, unembed};
pub use swinfi::{FeatureImage, SwinFi};
pub use window::{window_partition, window_reverse};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("feature image or checkpoint built for config {found:#018x}, model expects {expected:#018x}")]
    IncompatibleCheckpoint { expected: u64, found: u64 },
    #[error("reference signal has zero energy")]
    DegenerateMetric,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
