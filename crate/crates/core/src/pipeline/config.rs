use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::csiprep::Mode;
use crate::model::ModelConfig;
use crate::syndata::SynthSpec;

/// Where frames come from and how they are cut.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default)]
    pub mode: Mode,
    /// Synthetic source; used when `captures` is empty.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    /// `CSI0` capture files.
    #[serde(default)]
    pub captures: Vec<PathBuf>,
    pub frame_len: usize,
    pub stride: usize,
    #[serde(default)]
    pub split_seed: u64,
    /// Keep at most this many training frames, balanced over classes.
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Evaluate reconstruction on the training frames instead of the
    /// validation split (overfit runs).
    #[serde(default)]
    pub eval_on_train: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Stop once validation NMSE reaches this level.
    #[serde(default)]
    pub target_nmse_db: Option<f64>,
}

fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// Also update the encoder through the classification loss.
    #[serde(default)]
    pub joint_finetune: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps: 500,
            seed: 0,
            joint_finetune: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IoConfig {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub classifier_checkpoint: Option<PathBuf>,
    /// Line-delimited JSON metrics.
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Everything one run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub io: IoConfig,
    /// Record zero wall time so metric streams are byte-identical.
    #[serde(default)]
    pub deterministic: bool,
}

impl RunConfig {
    /// Desk-scale overfit run: eight 4×64×64 amplitude frames, one per
    /// class, C = 32, two merges.
    pub fn overfit_preset(seed: u64) -> Self {
        let mut model = ModelConfig::swinfi(32, &[2, 2, 2], 4);
        model.input = [64, 64];
        model.n_classes = 8;
        let mut synth = SynthSpec::desk(seed, 64);
        synth.snr_db = f64::INFINITY;
        synth.packets_per_class = 1024;
        Self {
            model,
            data: DataConfig {
                mode: Mode::Amplitude,
                synth: Some(synth),
                captures: Vec::new(),
                frame_len: 64,
                stride: 64,
                split_seed: seed,
                train_limit: Some(8),
                eval_on_train: true,
            },
            train: TrainConfig {
                lr: 1e-2,
                batch_size: 8,
                max_steps: 2000,
                eval_every: 100,
                seed,
                clip_norm: 1.0,
                target_nmse_db: None,
            },
            classifier: ClassifierConfig {
                seed,
                ..ClassifierConfig::default()
            },
            io: IoConfig::default(),
            deterministic: true,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Channel count the data source produces in the configured mode.
    pub fn data_channels(&self) -> Option<usize> {
        self.data
            .synth
            .as_ref()
            .filter(|_| self.data.captures.is_empty())
            .map(|s| self.data.mode.channels(s.n_antennas))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let err = |m: String| Err(PipelineError::Config(m));
        if self.data.captures.is_empty() {
            let Some(spec) = &self.data.synth else {
                return err("data needs either capture paths or a synth section".into());
            };
            spec.validate()?;
        }
        for p in &self.data.captures {
            if !p.exists() {
                return err(format!("capture {} does not exist", p.display()));
            }
        }
        if let Some(d) = self.data_channels() {
            if d != self.model.in_channels {
                return err(format!(
                    "{:?} mode yields {d} channels, model expects {}",
                    self.data.mode, self.model.in_channels
                ));
            }
        }
        if self.data.frame_len == 0 || self.data.stride == 0 {
            return err("frame length and stride must be positive".into());
        }
        if self.data.frame_len > self.model.input[1] {
            return err(format!(
                "frames of {} packets exceed the model time extent {}",
                self.data.frame_len, self.model.input[1]
            ));
        }
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite())
            || t.batch_size == 0
            || t.eval_every == 0
            || t.clip_norm.is_nan()
            || t.clip_norm <= 0.0
        {
            return err(format!("invalid training settings {t:?}"));
        }
        let c = &self.classifier;
        if !(c.lr >= 0.0 && c.lr.is_finite()) {
            return err(format!("invalid classifier learning rate {}", c.lr));
        }
        Ok(())
    }
}
