//! From raw complex CSI captures to standardised amplitude/phase batches.

mod capture;
mod frames;
mod mask;
mod phase;

pub use capture::{
    parse_capture, raw_bandwidth, write_capture, RawCsiCapture, CAPTURE_HEADER_LEN, CAPTURE_MAGIC, CAPTURE_VERSION,
};
pub use frames::{
    amplitude_db, assemble_batch, compute_norm_stats, frame_windows, preprocess, sanitize_phase, CsiFrame,
    CsiFrameBatch, CsiMatrix, Mode, NormStats, ProcessedCapture, AMPLITUDE_FLOOR,
};
pub use mask::{mask_subcarriers, tone_index, usable_mask, usable_tones, MASK_TABLE_VERSION};
pub use phase::{linear_fit_correct, unwrap_phase, wrap_to_pi, LinearFitParams, PhaseRecord};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("capture format: {0}")]
    Format(String),
    #[error("expected {expected} bytes or values, found {actual}")]
    Length { expected: usize, actual: usize },
    #[error("linear phase fit needs distinct end subcarriers")]
    DegenerateFit,
    #[error("shape: {0}")]
    Shape(String),
    #[error("channel {channel} has zero variance on usable subcarriers")]
    DegenerateData { channel: usize },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PrepError> = std::result::Result<T, E>;
