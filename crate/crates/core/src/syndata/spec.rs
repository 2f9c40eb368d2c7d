use serde::{Deserialize, Serialize};

use super::{Result, SynthError};

/// One Doppler-like modulation: a sinusoid at `doppler_hz` over a Gaussian
/// band of subcarriers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub doppler_hz: f64,
    /// Centred tone index of the band centre.
    pub subcarrier_center: f64,
    /// Gaussian standard deviation of the band, in tones.
    pub bandwidth: f64,
}

/// Per-packet phase error `slope·k + offset + noise`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseError {
    /// Uniform range of the slope, radians per tone.
    pub slope_range: [f64; 2],
    /// Uniform range of the offset, radians.
    pub offset_range: [f64; 2],
    /// Per-element Gaussian phase noise, radians.
    pub noise_std: f64,
}

impl PhaseError {
    pub fn none() -> Self {
        Self {
            slope_range: [0.0, 0.0],
            offset_range: [0.0, 0.0],
            noise_std: 0.0,
        }
    }
}

impl Default for PhaseError {
    fn default() -> Self {
        Self {
            slope_range: [-0.05, 0.05],
            offset_range: [-std::f64::consts::PI, std::f64::consts::PI],
            noise_std: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_classes: usize,
    pub packets_per_class: usize,
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub sample_rate_hz: f64,
    /// One or more modulations per class.
    pub signatures: Vec<Vec<ClassSignature>>,
    /// Relative depth of each modulation.
    #[serde(default = "default_depth")]
    pub modulation_depth: f64,
    #[serde(default)]
    pub phase_error: PhaseError,
    /// Signal-to-noise ratio; `inf` disables noise.
    pub snr_db: f64,
}

fn default_depth() -> f64 {
    0.5
}

impl SynthSpec {
    /// Eight classes, four antennas, 100 Hz, 20 dB SNR. `n_subcarriers` is
    /// 64 for fast runs or 256 for the full layout.
    pub fn desk(seed: u64, n_subcarriers: usize) -> Self {
        let n_classes = 8;
        let edge = if n_subcarriers >= 256 {
            110.0
        } else {
            0.375 * n_subcarriers as f64
        };
        let signatures = (0..n_classes)
            .map(|c| {
                let cf = c as f64;
                vec![ClassSignature {
                    doppler_hz: 3.0 + 5.0 * cf,
                    subcarrier_center: -edge + 2.0 * edge * cf / (n_classes - 1) as f64,
                    bandwidth: edge / 8.0 * (1.0 + (c % 3) as f64 * 0.5),
                }]
            })
            .collect();
        Self {
            seed,
            n_classes,
            packets_per_class: 1024,
            n_antennas: 4,
            n_subcarriers,
            sample_rate_hz: 100.0,
            signatures,
            modulation_depth: default_depth(),
            phase_error: PhaseError::default(),
            snr_db: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SynthError::Spec(m));
        if self.n_classes == 0 || self.n_classes > 256 {
            return err(format!("n_classes must be in 1..=256, got {}", self.n_classes));
        }
        if self.n_antennas == 0 || self.n_subcarriers < 2 {
            return err(format!(
                "need at least one antenna and two subcarriers, got {}×{}",
                self.n_antennas, self.n_subcarriers
            ));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return err(format!("invalid sample rate {}", self.sample_rate_hz));
        }
        if self.signatures.len() != self.n_classes {
            return err(format!(
                "{} signature sets for {} classes",
                self.signatures.len(),
                self.n_classes
            ));
        }
        let nyquist = self.sample_rate_hz / 2.0;
        let half = (self.n_subcarriers / 2) as f64;
        for (c, set) in self.signatures.iter().enumerate() {
            if set.is_empty() {
                return err(format!("class {c} has no signature"));
            }
            for s in set {
                if !(s.doppler_hz > 0.0 && s.doppler_hz < nyquist) {
                    return err(format!("class {c}: Doppler {} Hz outside (0, {nyquist})", s.doppler_hz));
                }
                if !(s.subcarrier_center.abs() <= half && s.bandwidth > 0.0 && s.bandwidth.is_finite()) {
                    return err(format!("class {c}: band {s:?} outside ±{half} tones"));
                }
            }
            if self.signatures[..c].contains(set) {
                return err(format!("class {c} repeats an earlier signature set"));
            }
        }
        let pe = &self.phase_error;
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        if !ordered(pe.slope_range) || !ordered(pe.offset_range) || pe.noise_std.is_nan() || pe.noise_std < 0.0 {
            return err(format!("invalid phase error {pe:?}"));
        }
        if !(self.modulation_depth >= 0.0 && self.modulation_depth < 1.0) {
            return err(format!("modulation depth {} outside [0, 1)", self.modulation_depth));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return err(format!("invalid SNR {}", self.snr_db));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_is_valid_and_toml_round_trips() {
        for n in [64, 256] {
            let spec = SynthSpec::desk(1, n);
            spec.validate().unwrap();
            let text = toml::to_string(&spec).unwrap();
            let back: SynthSpec = toml::from_str(&text).unwrap();
            assert_eq!(back, spec);
        }
        let mut spec = SynthSpec::desk(1, 64);
        spec.snr_db = f64::INFINITY;
        let back: SynthSpec = toml::from_str(&toml::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back.snr_db, f64::INFINITY);
    }

    #[test]
    fn rejects_bad_specs() {
        let base = SynthSpec::desk(1, 64);
        let mut s = base.clone();
        s.signatures[0][0].doppler_hz = 50.0;
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.signatures[3] = s.signatures[1].clone();
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.signatures.pop();
        assert!(s.validate().is_err());
        let mut s = base;
        s.phase_error.slope_range = [1.0, -1.0];
        assert!(s.validate().is_err());
    }
}
