//! Deterministic synthetic CSI: a static multipath channel, class-specific
//! Doppler-like modulation, AWGN and per-packet linear phase corruption.

mod dataset;
mod generate;
mod spec;

pub use dataset::{generate_dataset, split_frames, Split, SynthDataset};
pub use generate::{generate_capture, generate_capture_detailed, SynthCapture, TONE_SPACING_HZ};
pub use spec::{ClassSignature, PhaseError, SynthSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Prep(#[from] crate::csiprep::PrepError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;
