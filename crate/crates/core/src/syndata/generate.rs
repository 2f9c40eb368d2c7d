use std::f64::consts::PI;

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Result, SynthError, SynthSpec};
use crate::csiprep::{tone_index, RawCsiCapture};

/// OFDM tone spacing used to turn path delays into per-tone phase.
pub const TONE_SPACING_HZ: f64 = 312_500.0;

const PATHS: usize = 4;

/// A generated capture together with what went into it.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCapture {
    pub capture: RawCsiCapture,
    /// Channel and modulation only: no noise, no phase error.
    pub clean: RawCsiCapture,
    /// Injected phase slope per packet, radians per tone.
    pub slopes: Vec<f64>,
    /// Injected phase offset per packet, radians.
    pub offsets: Vec<f64>,
}

/// Static multipath response `[antenna][subcarrier]`, fixed by the seed alone.
fn static_channel(spec: &SynthSpec) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.n_subcarriers;
    let mut out = Vec::with_capacity(spec.n_antennas * s);
    for _ in 0..spec.n_antennas {
        let gain = rng.random_range(0.5..1.5);
        let paths: Vec<(f64, f64, f64)> = (0..PATHS)
            .map(|l| {
                let (amp, delay) = if l == 0 {
                    (1.0, rng.random_range(0.0..20e-9))
                } else {
                    (rng.random_range(0.05..0.25), rng.random_range(20e-9..80e-9))
                };
                (amp, delay, rng.random_range(-PI..PI))
            })
            .collect();
        for row in 0..s {
            let f = tone_index(row, s) as f64 * TONE_SPACING_HZ;
            let h: Complex64 = paths
                .iter()
                .map(|&(a, tau, theta)| Complex64::from_polar(a, theta - 2.0 * PI * f * tau))
                .sum();
            out.push(h * gain);
        }
    }
    out
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Generate one capture of `class_id`.
pub fn generate_capture(spec: &SynthSpec, class_id: usize) -> Result<RawCsiCapture> {
    Ok(generate_capture_detailed(spec, class_id)?.capture)
}

/// [`generate_capture`] plus the clean capture and the injected phase terms.
pub fn generate_capture_detailed(spec: &SynthSpec, class_id: usize) -> Result<SynthCapture> {
    spec.validate()?;
    if class_id >= spec.n_classes {
        return Err(SynthError::Spec(format!(
            "class {class_id} out of range for {} classes",
            spec.n_classes
        )));
    }
    let (a, s, fs) = (spec.n_antennas, spec.n_subcarriers, spec.sample_rate_hz);
    let base = static_channel(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(class_id as u64 + 1);

    let sigs = &spec.signatures[class_id];
    // Per antenna and signature: starting phase of the modulation.
    let start: Vec<f64> = (0..a * sigs.len()).map(|_| rng.random_range(-PI..PI)).collect();
    // Band weights per signature and row.
    let bands: Vec<Vec<f64>> = sigs
        .iter()
        .map(|sig| {
            (0..s)
                .map(|row| {
                    let z = (tone_index(row, s) as f64 - sig.subcarrier_center) / sig.bandwidth;
                    (-0.5 * z * z).exp()
                })
                .collect()
        })
        .collect();

    let n = spec.packets_per_class;
    let label = class_id as u8;
    let mut clean = Vec::with_capacity(n * a * s);
    for p in 0..n {
        let t = p as f64 / fs;
        for ant in 0..a {
            for row in 0..s {
                let (mut amp, mut phase) = (1.0, 0.0);
                for (i, sig) in sigs.iter().enumerate() {
                    let w = 2.0 * PI * sig.doppler_hz * t + start[ant * sigs.len() + i];
                    let g = spec.modulation_depth * bands[i][row];
                    amp += g * w.cos();
                    phase += g * w.sin();
                }
                clean.push(base[ant * s + row] * Complex64::from_polar(amp.max(0.05), phase));
            }
        }
    }

    let noise_std = if spec.snr_db.is_finite() {
        let power = clean.iter().map(|h| h.norm_sqr()).sum::<f64>() / clean.len().max(1) as f64;
        (power / 10f64.powf(spec.snr_db / 10.0) / 2.0).sqrt()
    } else {
        0.0
    };
    let pe = spec.phase_error;
    let mut slopes = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    let mut noisy = Vec::with_capacity(clean.len());
    for packet in clean.chunks(a * s) {
        let slope = uniform(&mut rng, pe.slope_range);
        let offset = uniform(&mut rng, pe.offset_range);
        slopes.push(slope);
        offsets.push(offset);
        for (i, &h) in packet.iter().enumerate() {
            let mut v = h;
            if noise_std > 0.0 {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                v += Complex64::new(re, im) * noise_std;
            }
            let mut err = slope * tone_index(i % s, s) as f64 + offset;
            if pe.noise_std > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                err += z * pe.noise_std;
            }
            noisy.push(v * Complex64::from_polar(1.0, err));
        }
    }

    let pack = |values: &[Complex64]| -> Result<RawCsiCapture> {
        let mut cap = RawCsiCapture::new(a, s, fs, label)?;
        cap.packets = values
            .iter()
            .map(|v| Complex32::new(v.re as f32, v.im as f32))
            .collect();
        Ok(cap)
    };
    Ok(SynthCapture {
        capture: pack(&noisy)?,
        clean: pack(&clean)?,
        slopes,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    use super::*;
    use crate::csiprep::{sanitize_phase, usable_mask, wrap_to_pi};
    use crate::syndata::PhaseError;

    #[test]
    fn deterministic_bytes() {
        let mut spec = SynthSpec::desk(11, 64);
        spec.packets_per_class = 50;
        let a = generate_capture(&spec, 3).unwrap().to_bytes();
        let b = generate_capture(&spec, 3).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_ne!(a, generate_capture(&spec, 4).unwrap().to_bytes());
        spec.seed = 12;
        assert_ne!(a, generate_capture(&spec, 3).unwrap().to_bytes());
        assert!(generate_capture(&spec, 8).is_err());
    }

    #[test]
    fn amplitude_spectrum_peaks_at_doppler() {
        let mut spec = SynthSpec::desk(5, 64);
        spec.snr_db = f64::INFINITY;
        spec.phase_error = PhaseError::none();
        spec.packets_per_class = 1000;
        for class in [0, 4, 7] {
            let sig = spec.signatures[class][0];
            let cap = generate_capture(&spec, class).unwrap();
            let row = (sig.subcarrier_center.round() as i32 + 32) as usize;
            let series: Vec<f64> = (0..cap.n_packets()).map(|p| cap.packet(p)[row].norm() as f64).collect();
            let mean = series.iter().sum::<f64>() / series.len() as f64;
            let mut buf: Vec<Complex<f64>> = series.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
            FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
            let half = buf.len() / 2;
            let peak = (1..half)
                .max_by(|&i, &j| buf[i].norm().total_cmp(&buf[j].norm()))
                .unwrap();
            let expected = (sig.doppler_hz * buf.len() as f64 / spec.sample_rate_hz).round() as usize;
            assert_eq!(peak, expected, "class {class}");
        }
    }

    #[test]
    fn phase_fit_recovers_injected_terms() {
        let mut spec = SynthSpec::desk(21, 64);
        spec.snr_db = f64::INFINITY;
        spec.phase_error.noise_std = 0.0;
        spec.packets_per_class = 40;
        let mask = usable_mask(64).unwrap();
        let out = generate_capture_detailed(&spec, 2).unwrap();
        for p in 0..out.capture.n_packets() {
            for ant in 0..spec.n_antennas {
                let corrupted = sanitize_phase(&out.capture, p, ant, &mask).unwrap();
                let clean = sanitize_phase(&out.clean, p, ant, &mask).unwrap();
                assert!((corrupted.slope - clean.slope - out.slopes[p]).abs() < 1e-6);
                let db = wrap_to_pi(corrupted.intercept - clean.intercept - out.offsets[p]);
                assert!(db.abs() < 1e-6, "packet {p}: {db}");
                for (x, y) in corrupted.phi_tilde.iter().zip(&clean.phi_tilde) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn noise_follows_snr() {
        let mut spec = SynthSpec::desk(2, 64);
        spec.packets_per_class = 200;
        spec.phase_error = PhaseError::none();
        spec.snr_db = 10.0;
        let out = generate_capture_detailed(&spec, 0).unwrap();
        let (mut sig, mut err) = (0.0, 0.0);
        for (x, y) in out.clean.packets.iter().zip(&out.capture.packets) {
            sig += x.norm_sqr() as f64;
            err += (y - x).norm_sqr() as f64;
        }
        let snr = 10.0 * (sig / err).log10();
        assert!((snr - 10.0).abs() < 0.2, "{snr}");
    }
}
