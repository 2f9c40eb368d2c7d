//! Phase sanitisation: unwrapping along subcarriers, then removal of the
//! linear-in-subcarrier error term left by packet detection delay, sampling
//! and carrier frequency offsets.

use std::f64::consts::PI;

use super::{PrepError, Result};

const TAU: f64 = 2.0 * PI;

/// Reduce an angle difference into `(-π, π]`.
#[inline]
pub fn wrap_to_pi(d: f64) -> f64 {
    d - TAU * ((d - PI) / TAU).ceil()
}

/// Add multiples of 2π so that every consecutive difference lies in `(-π, π]`.
/// The first element is unchanged.
pub fn unwrap_phase(phi: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phi.len());
    let Some(&first) = phi.first() else {
        return out;
    };
    out.push(first);
    let mut prev = first;
    for &p in &phi[1..] {
        let next = prev + wrap_to_pi(p - prev);
        out.push(next);
        prev = next;
    }
    out
}

/// Terms of the linear error model. `delta` is the timing offset and `beta`
/// the initial phase; both default to zero because neither is observable
/// from a single packet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFitParams {
    pub delta: f64,
    pub beta: f64,
    /// FFT size.
    pub fft_size: usize,
}

impl LinearFitParams {
    pub fn new(fft_size: usize) -> Self {
        Self {
            delta: 0.0,
            beta: 0.0,
            fft_size,
        }
    }
}

/// Outcome of [`linear_fit_correct`] for one packet and antenna.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseRecord {
    pub k: Vec<f64>,
    /// Unwrapped measured phase.
    pub phi_hat: Vec<f64>,
    /// Corrected phase.
    pub phi_tilde: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
}

/// Fit `a·k + b` from the endpoints and the mean, and subtract it.
///
/// The corrected phase always has equal endpoints; it has zero mean when the
/// subcarrier indices are centred (`Σk = 0`), as with the standard masks.
///
/// ```text
/// a  = (φ̂ₙ − φ̂₁)/(kₙ − k₁) − 2πδ/N
/// b  = mean(φ̂) − 2πδ/(nN)·Σk + β
/// φ̃ⱼ = φ̂ⱼ − (a·kⱼ + b)
/// ```
pub fn linear_fit_correct(phi_hat: &[f64], k: &[f64], params: &LinearFitParams) -> Result<PhaseRecord> {
    let n = phi_hat.len();
    if n != k.len() {
        return Err(PrepError::Shape(format!(
            "{n} phases for {} subcarrier indices",
            k.len()
        )));
    }
    if n < 2 || n > params.fft_size {
        return Err(PrepError::Shape(format!(
            "fit needs 2 ≤ n ≤ N, got n = {n}, N = {}",
            params.fft_size
        )));
    }
    if k.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PrepError::DegenerateFit);
    }
    let span = k[n - 1] - k[0];
    if span == 0.0 {
        return Err(PrepError::DegenerateFit);
    }
    let nf = n as f64;
    let big_n = params.fft_size as f64;
    let slope = (phi_hat[n - 1] - phi_hat[0]) / span - TAU * params.delta / big_n;
    let mean = phi_hat.iter().sum::<f64>() / nf;
    let k_sum: f64 = k.iter().sum();
    let intercept = mean - TAU * params.delta / (nf * big_n) * k_sum + params.beta;
    let phi_tilde = phi_hat
        .iter()
        .zip(k)
        .map(|(&p, &kj)| p - (slope * kj + intercept))
        .collect();
    Ok(PhaseRecord {
        k: k.to_vec(),
        phi_hat: phi_hat.to_vec(),
        phi_tilde,
        slope,
        intercept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_jump_is_corrected() {
        let out = unwrap_phase(&[0.0, 3.0, -3.0]);
        assert_eq!(out[..2], [0.0, 3.0]);
        assert!((out[2] - (TAU - 3.0)).abs() < 1e-12);
        assert!((out[2] - 3.2832).abs() < 1e-4);
    }

    #[test]
    fn smooth_ramp_unchanged() {
        let x = [0.0, 0.1, 0.2];
        assert_eq!(unwrap_phase(&x), x);
    }

    #[test]
    fn boundary_difference_of_pi_is_kept() {
        assert_eq!(wrap_to_pi(PI), PI);
        assert!((wrap_to_pi(-PI) - PI).abs() < 1e-15);
        assert!((wrap_to_pi(PI + 1e-9) + PI - 1e-9).abs() < 1e-12);
    }

    #[test]
    fn wrapped_line_is_recovered() {
        let line: Vec<f64> = (0..234).map(|j| 0.5 * j as f64).collect();
        let wrapped: Vec<f64> = line.iter().map(|&v| wrap_to_pi(v)).collect();
        let out = unwrap_phase(&wrapped);
        for (a, b) in out.iter().zip(&line) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn pure_line_fits_exactly() {
        let k: Vec<f64> = (-5..=5).map(f64::from).collect();
        let phi: Vec<f64> = k.iter().map(|&v| 0.5 * v + 1.0).collect();
        let r = linear_fit_correct(&phi, &k, &LinearFitParams::new(256)).unwrap();
        assert!((r.slope - 0.5).abs() < 1e-12);
        assert!((r.intercept - 1.0).abs() < 1e-12);
        assert!(r.phi_tilde.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constant_phase() {
        let k: Vec<f64> = (0..8).map(f64::from).collect();
        let r = linear_fit_correct(&[0.7; 8], &k, &LinearFitParams::new(64)).unwrap();
        assert_eq!(r.slope, 0.0);
        assert!((r.intercept - 0.7).abs() < 1e-15);
        assert!(r.phi_tilde.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn line_plus_sinusoid_leaves_detrended_sinusoid() {
        // On symmetric k the line vanishes and what is left is the sinusoid
        // minus its own endpoint line and its mean.
        let k: Vec<f64> = (-32..=32).map(f64::from).collect();
        let sin: Vec<f64> = k
            .iter()
            .map(|&v| (TAU * v / 64.0).sin() + 0.3 * (TAU * v / 16.0).cos())
            .collect();
        let phi: Vec<f64> = k.iter().zip(&sin).map(|(&v, &s)| 0.2 * v - 0.4 + s).collect();
        let r = linear_fit_correct(&phi, &k, &LinearFitParams::new(128)).unwrap();
        let n = k.len();
        let a_s = (sin[n - 1] - sin[0]) / (k[n - 1] - k[0]);
        let mean_s = sin.iter().sum::<f64>() / n as f64;
        assert!((r.slope - (0.2 + a_s)).abs() < 1e-12);
        for j in 0..n {
            let expect = sin[j] - a_s * k[j] - mean_s;
            assert!((r.phi_tilde[j] - expect).abs() < 1e-12, "{j}");
        }
    }

    #[test]
    fn timing_offset_terms() {
        let k = [1.0, 2.0, 3.0];
        let p = LinearFitParams {
            delta: 2.0,
            beta: 0.25,
            fft_size: 8,
        };
        let r = linear_fit_correct(&[0.0, 0.0, 0.0], &k, &p).unwrap();
        assert!((r.slope + TAU * 2.0 / 8.0).abs() < 1e-12);
        assert!((r.intercept - (-TAU * 2.0 / 24.0 * 6.0 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let p = LinearFitParams::new(64);
        assert!(matches!(
            linear_fit_correct(&[0.0, 1.0], &[3.0, 3.0], &p),
            Err(PrepError::DegenerateFit)
        ));
        assert!(linear_fit_correct(&[0.0], &[1.0], &p).is_err());
        assert!(linear_fit_correct(&[0.0, 1.0], &[1.0], &p).is_err());
    }
}
