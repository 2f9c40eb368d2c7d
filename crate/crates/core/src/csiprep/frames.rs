use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mask::{mask_subcarriers, usable_tones};
use super::phase::{linear_fit_correct, unwrap_phase, LinearFitParams, PhaseRecord};
use super::{PrepError, RawCsiCapture, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Floor added to |h| before taking the logarithm.
pub const AMPLITUDE_FLOOR: f64 = 1e-12;

/// Values indexed `[packet][antenna][subcarrier]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiMatrix {
    pub n_packets: usize,
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub values: Vec<f64>,
}

impl CsiMatrix {
    pub fn row(&self, packet: usize, antenna: usize) -> &[f64] {
        let s = self.n_subcarriers;
        let base = (packet * self.n_antennas + antenna) * s;
        &self.values[base..base + s]
    }
}

/// `20·log10(|h| + 1e-12)` for every entry of the capture.
pub fn amplitude_db(capture: &RawCsiCapture) -> CsiMatrix {
    let values = capture
        .packets
        .iter()
        .map(|h| {
            let mag = (h.re as f64).hypot(h.im as f64);
            20.0 * (mag + AMPLITUDE_FLOOR).log10()
        })
        .collect();
    CsiMatrix {
        n_packets: capture.n_packets(),
        n_antennas: capture.n_antennas,
        n_subcarriers: capture.n_subcarriers,
        values,
    }
}

/// Unwrap and linearly correct the phase of one packet/antenna over the
/// usable subcarriers.
pub fn sanitize_phase(capture: &RawCsiCapture, packet: usize, antenna: usize, mask: &[bool]) -> Result<PhaseRecord> {
    if mask.len() != capture.n_subcarriers {
        return Err(PrepError::Shape(format!(
            "mask of {} for {} subcarriers",
            mask.len(),
            capture.n_subcarriers
        )));
    }
    let s = capture.n_subcarriers;
    let row = &capture.packet(packet)[antenna * s..(antenna + 1) * s];
    let raw: Vec<f64> = row
        .iter()
        .zip(mask)
        .filter(|(_, &u)| u)
        .map(|(h, _)| (h.im as f64).atan2(h.re as f64))
        .collect();
    let k = usable_tones(mask);
    linear_fit_correct(&unwrap_phase(&raw), &k, &LinearFitParams::new(s))
}

/// A capture after amplitude conversion, phase sanitisation and masking.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedCapture {
    pub label: u8,
    pub amplitude: CsiMatrix,
    pub phase: CsiMatrix,
    pub usable: Arc<[bool]>,
}

pub fn preprocess(capture: &RawCsiCapture, mask: &[bool]) -> Result<ProcessedCapture> {
    if mask.len() != capture.n_subcarriers {
        return Err(PrepError::Shape(format!(
            "mask of {} for {} subcarriers",
            mask.len(),
            capture.n_subcarriers
        )));
    }
    let mut amplitude = amplitude_db(capture);
    let s = capture.n_subcarriers;
    mask_subcarriers(
        &mut amplitude.values,
        1,
        &repeat_mask(mask, capture.n_packets() * capture.n_antennas),
    )?;

    let mut phase = vec![0.0; capture.packets.len()];
    for p in 0..capture.n_packets() {
        for a in 0..capture.n_antennas {
            let rec = sanitize_phase(capture, p, a, mask)?;
            let row = &mut phase[(p * capture.n_antennas + a) * s..][..s];
            let mut fixed = rec.phi_tilde.iter();
            for (v, &u) in row.iter_mut().zip(mask) {
                if u {
                    *v = *fixed.next().unwrap();
                }
            }
        }
    }
    Ok(ProcessedCapture {
        label: capture.label,
        phase: CsiMatrix {
            values: phase,
            ..amplitude.clone()
        },
        amplitude,
        usable: mask.into(),
    })
}

fn repeat_mask(mask: &[bool], times: usize) -> Vec<bool> {
    mask.iter().copied().cycle().take(mask.len() * times).collect()
}

/// `T` consecutive packets of one capture, laid out `[antenna][subcarrier][time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiFrame {
    pub label: u8,
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub len: usize,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub usable: Arc<[bool]>,
}

/// Cut `capture` into frames of `len` packets, starting every `stride`
/// packets. A capture shorter than `len` yields no frames.
pub fn frame_windows(capture: &ProcessedCapture, len: usize, stride: usize) -> Result<Vec<CsiFrame>> {
    if len == 0 || stride == 0 {
        return Err(PrepError::Shape("frame length and stride must be positive".into()));
    }
    let p = capture.amplitude.n_packets;
    let (a, s) = (capture.amplitude.n_antennas, capture.amplitude.n_subcarriers);
    let mut frames = Vec::new();
    let mut start = 0;
    while start + len <= p {
        let mut amp = vec![0.0; a * s * len];
        let mut pha = vec![0.0; a * s * len];
        for t in 0..len {
            for ant in 0..a {
                let src_a = capture.amplitude.row(start + t, ant);
                let src_p = capture.phase.row(start + t, ant);
                for sc in 0..s {
                    amp[(ant * s + sc) * len + t] = src_a[sc];
                    pha[(ant * s + sc) * len + t] = src_p[sc];
                }
            }
        }
        frames.push(CsiFrame {
            label: capture.label,
            n_antennas: a,
            n_subcarriers: s,
            len,
            amplitude: amp,
            phase: pha,
            usable: capture.usable.clone(),
        });
        start += stride;
    }
    Ok(frames)
}

/// Which CSI components become model channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Amplitude,
    Phase,
    /// Amplitude channels first, then phase channels.
    Mixed,
}

impl Mode {
    pub fn channels(self, n_antennas: usize) -> usize {
        match self {
            Mode::Amplitude | Mode::Phase => n_antennas,
            Mode::Mixed => 2 * n_antennas,
        }
    }

    fn source(self, frame: &CsiFrame, channel: usize) -> &[f64] {
        let plane = frame.n_subcarriers * frame.len;
        let (data, a) = match self {
            Mode::Amplitude => (&frame.amplitude, channel),
            Mode::Phase => (&frame.phase, channel),
            Mode::Mixed if channel < frame.n_antennas => (&frame.amplitude, channel),
            Mode::Mixed => (&frame.phase, channel - frame.n_antennas),
        };
        &data[a * plane..(a + 1) * plane]
    }
}

/// Per-channel standardisation statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Model input `[batch, channel, subcarrier, time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiFrameBatch<T> {
    pub data: Tensor<T>,
    pub labels: Vec<u8>,
    pub norm_stats: NormStats,
    pub usable: Arc<[bool]>,
}

impl<T: Scalar> CsiFrameBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Usable-row statistics of `frames` in `mode`.
pub fn compute_norm_stats(frames: &[CsiFrame], mode: Mode) -> Result<NormStats> {
    let first = frames.first().ok_or_else(|| PrepError::Shape("no frames".into()))?;
    let d = mode.channels(first.n_antennas);
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for c in 0..d {
        let mut n = 0usize;
        let mut sum = 0.0;
        for f in frames {
            for (row, &u) in mode.source(f, c).chunks(f.len).zip(f.usable.iter()) {
                if u {
                    sum += row.iter().sum::<f64>();
                    n += row.len();
                }
            }
        }
        if n == 0 {
            return Err(PrepError::DegenerateData { channel: c });
        }
        let m = sum / n as f64;
        let mut ss = 0.0;
        for f in frames {
            for (row, &u) in mode.source(f, c).chunks(f.len).zip(f.usable.iter()) {
                if u {
                    ss += row.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
            }
        }
        mean[c] = m;
        std[c] = (ss / n as f64).sqrt();
    }
    Ok(NormStats { mean, std })
}

/// Stack `frames` into a standardised batch. Statistics are computed from the
/// frames when `norm_stats` is `None`. Masked rows stay exactly zero.
pub fn assemble_batch<T: Scalar>(
    frames: &[CsiFrame],
    mode: Mode,
    norm_stats: Option<&NormStats>,
) -> Result<CsiFrameBatch<T>> {
    let first = frames.first().ok_or_else(|| PrepError::Shape("no frames".into()))?;
    let (a, s, t) = (first.n_antennas, first.n_subcarriers, first.len);
    if frames
        .iter()
        .any(|f| (f.n_antennas, f.n_subcarriers, f.len) != (a, s, t) || f.usable != first.usable)
    {
        return Err(PrepError::Shape("frames differ in shape or mask".into()));
    }
    let d = mode.channels(a);
    let stats = match norm_stats {
        Some(st) => st.clone(),
        None => compute_norm_stats(frames, mode)?,
    };
    if stats.mean.len() != d || stats.std.len() != d {
        return Err(PrepError::Shape(format!(
            "normalisation stats for {} channels, batch has {d}",
            stats.mean.len()
        )));
    }
    let degenerate = |(m, sd): (&f64, &f64)| !sd.is_finite() || *sd <= 1e-12 * (1.0 + m.abs());
    if let Some(c) = stats.mean.iter().zip(&stats.std).position(degenerate) {
        return Err(PrepError::DegenerateData { channel: c });
    }
    let mut data = Vec::with_capacity(frames.len() * d * s * t);
    for f in frames {
        for c in 0..d {
            let (m, sd) = (stats.mean[c], stats.std[c]);
            for (row, &u) in mode.source(f, c).chunks(t).zip(f.usable.iter()) {
                if u {
                    data.extend(row.iter().map(|&v| T::of((v - m) / sd)));
                } else {
                    data.extend(std::iter::repeat_n(T::zero(), t));
                }
            }
        }
    }
    Ok(CsiFrameBatch {
        data: Tensor::new(vec![frames.len(), d, s, t], data)?,
        labels: frames.iter().map(|f| f.label).collect(),
        norm_stats: stats,
        usable: first.usable.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csiprep::usable_mask;
    use num_complex::Complex32;

    fn capture(packets: usize, s: usize) -> RawCsiCapture {
        let mut c = RawCsiCapture::new(2, s, 100.0, 3).unwrap();
        for p in 0..packets {
            let vals: Vec<Complex32> = (0..2 * s)
                .map(|i| {
                    Complex32::from_polar(
                        1.0 + 0.01 * ((i * 7 + p * 3) % 11) as f32,
                        0.05 * i as f32 + 0.3 * p as f32,
                    )
                })
                .collect();
            c.push_packet(&vals).unwrap();
        }
        c
    }

    #[test]
    fn amplitude_reference_points() {
        let mut c = RawCsiCapture::new(1, 3, 100.0, 0).unwrap();
        c.push_packet(&[
            Complex32::new(1.0, 0.0),
            Complex32::new(6.0, 8.0),
            Complex32::new(0.0, 0.0),
        ])
        .unwrap();
        let a = amplitude_db(&c);
        assert!(a.values[0].abs() < 1e-9);
        assert!((a.values[1] - 20.0).abs() < 1e-9);
        assert!((a.values[2] + 240.0).abs() < 1e-9);
    }

    #[test]
    fn frame_counts() {
        let mask = usable_mask(64).unwrap();
        for (packets, expect) in [(256, 1), (255, 0), (600, 2)] {
            let pc = preprocess(&capture(packets, 64), &mask).unwrap();
            assert_eq!(frame_windows(&pc, 256, 256).unwrap().len(), expect);
        }
        let pc = preprocess(&capture(300, 64), &mask).unwrap();
        assert_eq!(frame_windows(&pc, 256, 16).unwrap().len(), 3);
        assert!(frame_windows(&pc, 256, 0).is_err());
    }

    #[test]
    fn frame_count_for_five_minutes() {
        // 5 min at 100 Hz in frames of 256.
        assert_eq!((0..).step_by(256).take_while(|s| s + 256 <= 30_000).count(), 117);
    }

    #[test]
    fn masked_rows_survive_standardisation() {
        let mask = usable_mask(64).unwrap();
        let pc = preprocess(&capture(40, 64), &mask).unwrap();
        let frames = frame_windows(&pc, 16, 8).unwrap();
        let batch: CsiFrameBatch<f64> = assemble_batch(&frames, Mode::Mixed, None).unwrap();
        assert_eq!(batch.data.shape(), &[frames.len(), 4, 64, 16]);
        let v = batch.data.data();
        for (r, row) in v.chunks(16).enumerate() {
            if !mask[r % 64] {
                assert!(row.iter().all(|&x| x == 0.0));
            }
        }
        // Usable rows are standardised per channel.
        for c in 0..4 {
            let mut vals = Vec::new();
            for b in 0..frames.len() {
                for (sc, _) in mask.iter().enumerate().filter(|(_, &u)| u) {
                    let base = ((b * 4 + c) * 64 + sc) * 16;
                    vals.extend_from_slice(&v[base..base + 16]);
                }
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-6 && (sd - 1.0).abs() < 1e-3, "{c}: {mean} {sd}");
        }
    }

    #[test]
    fn supplied_stats_are_used_verbatim() {
        let mask = usable_mask(64).unwrap();
        let frames = frame_windows(&preprocess(&capture(32, 64), &mask).unwrap(), 16, 16).unwrap();
        let stats = NormStats {
            mean: vec![0.0; 2],
            std: vec![2.0; 2],
        };
        let b: CsiFrameBatch<f64> = assemble_batch(&frames, Mode::Amplitude, Some(&stats)).unwrap();
        assert_eq!(b.norm_stats, stats);
        let bad = NormStats {
            mean: vec![0.0; 2],
            std: vec![0.0, 1.0],
        };
        assert!(matches!(
            assemble_batch::<f64>(&frames, Mode::Amplitude, Some(&bad)),
            Err(PrepError::DegenerateData { channel: 0 })
        ));
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let mask = usable_mask(64).unwrap();
        let mut c = RawCsiCapture::new(1, 64, 100.0, 0).unwrap();
        for _ in 0..8 {
            c.push_packet(&vec![Complex32::new(1.0, 0.0); 64]).unwrap();
        }
        let frames = frame_windows(&preprocess(&c, &mask).unwrap(), 8, 8).unwrap();
        assert!(matches!(
            assemble_batch::<f32>(&frames, Mode::Amplitude, None),
            Err(PrepError::DegenerateData { channel: 0 })
        ));
    }
}
