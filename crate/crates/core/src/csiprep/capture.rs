//! The `CSI0` raw capture container.
//!
//! Little-endian layout:
//!
//! ```text
//! "CSI0"  u8 version=1  u8 n_antennas  u16 n_subcarriers  u32 sample_rate_centihz
//! u8 label  u8 reserved=0  u32 packet_count
//! packet_count × n_antennas × n_subcarriers × (f32 re, f32 im)
//! ```

use std::path::Path;

use num_complex::Complex32;

use super::{PrepError, Result};

pub const CAPTURE_MAGIC: [u8; 4] = *b"CSI0";
pub const CAPTURE_VERSION: u8 = 1;
pub const CAPTURE_HEADER_LEN: usize = 18;

/// One recording: complex CSI per packet, antenna and subcarrier.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCsiCapture {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub sample_rate_centihz: u32,
    pub label: u8,
    /// Packet-major, then antenna, then subcarrier.
    pub packets: Vec<Complex32>,
}

impl RawCsiCapture {
    pub fn new(n_antennas: usize, n_subcarriers: usize, sample_rate_hz: f64, label: u8) -> Result<Self> {
        if n_antennas == 0 || n_antennas > u8::MAX as usize || n_subcarriers == 0 || n_subcarriers > u16::MAX as usize {
            return Err(PrepError::Format(format!(
                "unsupported geometry {n_antennas} antennas × {n_subcarriers} subcarriers"
            )));
        }
        let centihz = (sample_rate_hz * 100.0).round();
        if !(centihz > 0.0 && centihz <= u32::MAX as f64) {
            return Err(PrepError::Format(format!("invalid sample rate {sample_rate_hz} Hz")));
        }
        Ok(Self {
            n_antennas,
            n_subcarriers,
            sample_rate_centihz: centihz as u32,
            label,
            packets: Vec::new(),
        })
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_centihz as f64 / 100.0
    }

    pub fn packet_len(&self) -> usize {
        self.n_antennas * self.n_subcarriers
    }

    pub fn n_packets(&self) -> usize {
        self.packets.len() / self.packet_len()
    }

    pub fn packet(&self, p: usize) -> &[Complex32] {
        let n = self.packet_len();
        &self.packets[p * n..(p + 1) * n]
    }

    pub fn push_packet(&mut self, values: &[Complex32]) -> Result<()> {
        if values.len() != self.packet_len() {
            return Err(PrepError::Length {
                expected: self.packet_len(),
                actual: values.len(),
            });
        }
        self.packets.extend_from_slice(values);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CAPTURE_HEADER_LEN + self.packets.len() * 8);
        out.extend_from_slice(&CAPTURE_MAGIC);
        out.push(CAPTURE_VERSION);
        out.push(self.n_antennas as u8);
        out.extend_from_slice(&(self.n_subcarriers as u16).to_le_bytes());
        out.extend_from_slice(&self.sample_rate_centihz.to_le_bytes());
        out.push(self.label);
        out.push(0);
        out.extend_from_slice(&(self.n_packets() as u32).to_le_bytes());
        for c in &self.packets {
            out.extend_from_slice(&c.re.to_le_bytes());
            out.extend_from_slice(&c.im.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CAPTURE_HEADER_LEN {
            return Err(PrepError::Length {
                expected: CAPTURE_HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if bytes[..4] != CAPTURE_MAGIC {
            return Err(PrepError::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes[4] != CAPTURE_VERSION {
            return Err(PrepError::Format(format!("unsupported version {}", bytes[4])));
        }
        let n_antennas = bytes[5] as usize;
        let n_subcarriers = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let sample_rate_centihz = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let label = bytes[12];
        if bytes[13] != 0 {
            return Err(PrepError::Format(format!("reserved byte is {}", bytes[13])));
        }
        if n_antennas == 0 || n_subcarriers == 0 || sample_rate_centihz == 0 {
            return Err(PrepError::Format("zero antennas, subcarriers or sample rate".into()));
        }
        let count = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
        let values = count * n_antennas * n_subcarriers;
        let payload = &bytes[CAPTURE_HEADER_LEN..];
        if payload.len() != values * 8 {
            return Err(PrepError::Length {
                expected: values * 8,
                actual: payload.len(),
            });
        }
        let packets = payload
            .chunks_exact(8)
            .map(|c| {
                Complex32::new(
                    f32::from_le_bytes(c[..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..].try_into().unwrap()),
                )
            })
            .collect();
        Ok(Self {
            n_antennas,
            n_subcarriers,
            sample_rate_centihz,
            label,
            packets,
        })
    }
}

pub fn parse_capture(path: impl AsRef<Path>) -> Result<RawCsiCapture> {
    RawCsiCapture::from_bytes(&std::fs::read(path)?)
}

pub fn write_capture(capture: &RawCsiCapture, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, capture.to_bytes())?;
    Ok(())
}

/// Bits per second of the uncompressed stream: two 4-byte floats per complex
/// value, every antenna and subcarrier, at the packet rate.
pub fn raw_bandwidth(n_antennas: usize, n_subcarriers: usize, sample_rate_hz: f64) -> f64 {
    n_antennas as f64 * n_subcarriers as f64 * sample_rate_hz * 2.0 * 4.0 * 8.0
}

impl RawCsiCapture {
    pub fn raw_bandwidth(&self) -> f64 {
        raw_bandwidth(self.n_antennas, self.n_subcarriers, self.sample_rate_hz())
    }
}
