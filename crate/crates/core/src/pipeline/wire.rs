//! Length-implied binary records for feature images.
//!
//! ```text
//! offset size field
//! 0      4    magic "SWFI"
//! 4      1    version
//! 5      1    dtype (0 = f32)
//! 6      2    channels C
//! 8      2    grid g_S
//! 10     2    grid g_T
//! 12     4    frame id
//! 16     8    config digest
//! 24     ...  g_S·g_T·C little-endian f32, token-major
//! ```

use std::io::{self, Read};

use super::{PipelineError, Result};
use crate::model::FeatureImage;
use crate::tensor::Tensor;

pub const WIRE_MAGIC: [u8; 4] = *b"SWFI";
pub const WIRE_VERSION: u8 = 1;
pub const WIRE_HEADER_LEN: usize = 24;
const DTYPE_F32: u8 = 0;

fn dim(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| PipelineError::Format(format!("{what} {v} does not fit the wire header")))
}

/// Encode one feature image.
pub fn serialize_feature_image(fi: &FeatureImage<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(WIRE_HEADER_LEN + 4 * fi.numel());
    out.extend_from_slice(&WIRE_MAGIC);
    out.push(WIRE_VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&dim(fi.channels, "channel count")?.to_le_bytes());
    out.extend_from_slice(&dim(fi.grid[0], "grid")?.to_le_bytes());
    out.extend_from_slice(&dim(fi.grid[1], "grid")?.to_le_bytes());
    out.extend_from_slice(&fi.frame_id.to_le_bytes());
    out.extend_from_slice(&fi.config_digest.to_le_bytes());
    for v in fi.feats.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Header {
    channels: usize,
    grid: [usize; 2],
    frame_id: u32,
    digest: u64,
}

impl Header {
    fn payload_len(&self) -> usize {
        4 * self.channels * self.grid[0] * self.grid[1]
    }
}

fn parse_header(b: &[u8]) -> Result<Header> {
    if b.len() < WIRE_HEADER_LEN || b[..4] != WIRE_MAGIC {
        return Err(PipelineError::Format("missing SWFI magic".into()));
    }
    if b[4] != WIRE_VERSION {
        return Err(PipelineError::Format(format!("unsupported wire version {}", b[4])));
    }
    if b[5] != DTYPE_F32 {
        return Err(PipelineError::Format(format!("unsupported dtype {}", b[5])));
    }
    let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]) as usize;
    let h = Header {
        channels: u16_at(6),
        grid: [u16_at(8), u16_at(10)],
        frame_id: u32::from_le_bytes(b[12..16].try_into().unwrap()),
        digest: u64::from_le_bytes(b[16..24].try_into().unwrap()),
    };
    if h.channels == 0 || h.grid[0] == 0 || h.grid[1] == 0 {
        return Err(PipelineError::Format("zero extent in header".into()));
    }
    Ok(h)
}

fn build(h: &Header, payload: &[u8]) -> FeatureImage<f32> {
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureImage {
        grid: h.grid,
        channels: h.channels,
        feats: Tensor::new(vec![h.grid[0] * h.grid[1], h.channels], data).expect("payload shape"),
        frame_id: h.frame_id,
        config_digest: h.digest,
    }
}

/// Decode exactly one record; trailing or missing bytes are an error.
pub fn deserialize_feature_image(bytes: &[u8]) -> Result<FeatureImage<f32>> {
    let h = parse_header(bytes)?;
    let expected = WIRE_HEADER_LEN + h.payload_len();
    if bytes.len() != expected {
        return Err(PipelineError::Format(format!(
            "record is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    Ok(build(&h, &bytes[WIRE_HEADER_LEN..]))
}

/// Streaming reader that skips damaged records.
///
/// A header that fails to parse, or a record whose payload is cut short by
/// the next magic or by the end of the stream, is dropped and counted in
/// [`warnings`](Self::warnings); reading resumes at the next `SWFI`.
pub struct FeatureImageReader<R> {
    inner: R,
    buf: Vec<u8>,
    eof: bool,
    warnings: u64,
    expected_digest: Option<u64>,
}

impl<R: Read> FeatureImageReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            buf: Vec::new(),
            eof: false,
            warnings: 0,
            expected_digest: None,
        }
    }

    /// Reject records carrying another config digest with a fatal error.
    pub fn expect_digest(mut self, digest: u64) -> Self {
        self.expected_digest = Some(digest);
        self
    }

    pub fn warnings(&self) -> u64 {
        self.warnings
    }

    fn fill(&mut self, want: usize) -> io::Result<()> {
        let mut chunk = [0u8; 8192];
        while self.buf.len() < want && !self.eof {
            let n = self.inner.read(&mut chunk)?;
            if n == 0 {
                self.eof = true;
            } else {
                self.buf.extend_from_slice(&chunk[..n]);
            }
        }
        Ok(())
    }

    fn find_magic(&self, from: usize) -> Option<usize> {
        self.buf
            .get(from..)?
            .windows(4)
            .position(|w| w == WIRE_MAGIC)
            .map(|p| p + from)
    }

    /// Next intact record, `Ok(None)` at end of stream.
    pub fn next_image(&mut self) -> Result<Option<FeatureImage<f32>>> {
        loop {
            self.fill(WIRE_HEADER_LEN)?;
            match self.find_magic(0) {
                Some(0) => {}
                Some(p) => {
                    self.warnings += 1;
                    self.buf.drain(..p);
                    continue;
                }
                None if self.eof => {
                    if !self.buf.is_empty() {
                        self.warnings += 1;
                        self.buf.clear();
                    }
                    return Ok(None);
                }
                None => {
                    // Keep a possible partial magic at the tail.
                    let keep = self.buf.len().min(3);
                    self.buf.drain(..self.buf.len() - keep);
                    self.fill(self.buf.len() + 1)?;
                    continue;
                }
            }
            if self.buf.len() < WIRE_HEADER_LEN {
                self.warnings += 1;
                self.buf.clear();
                return Ok(None);
            }
            let header = match parse_header(&self.buf[..WIRE_HEADER_LEN]) {
                Ok(h) => h,
                Err(_) => {
                    self.warnings += 1;
                    self.buf.drain(..1);
                    continue;
                }
            };
            let total = WIRE_HEADER_LEN + header.payload_len();
            self.fill(total)?;
            // A magic inside the payload region means this record was cut.
            let cut = self
                .find_magic(WIRE_HEADER_LEN)
                .filter(|&p| p < total.min(self.buf.len()));
            if let Some(p) = cut {
                self.warnings += 1;
                self.buf.drain(..p);
                continue;
            }
            if self.buf.len() < total {
                self.warnings += 1;
                self.buf.clear();
                return Ok(None);
            }
            if let Some(expected) = self.expected_digest {
                if header.digest != expected {
                    return Err(PipelineError::IncompatibleCheckpoint {
                        expected,
                        found: header.digest,
                    });
                }
            }
            let fi = build(&header, &self.buf[WIRE_HEADER_LEN..total]);
            self.buf.drain(..total);
            return Ok(Some(fi));
        }
    }
}

impl<R: Read> Iterator for FeatureImageReader<R> {
    type Item = Result<FeatureImage<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_image().transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(frame_id: u32, seed: f32) -> FeatureImage<f32> {
        FeatureImage {
            grid: [2, 3],
            channels: 4,
            feats: Tensor::from_fn(vec![6, 4], |i| seed + i as f32 * 0.25),
            frame_id,
            config_digest: 0xfeed_beef,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let fi = image(7, -1.5);
        let bytes = serialize_feature_image(&fi).unwrap();
        assert_eq!(bytes.len(), WIRE_HEADER_LEN + 4 * 24);
        assert_eq!(&bytes[..4], b"SWFI");
        assert_eq!(deserialize_feature_image(&bytes).unwrap(), fi);
        assert!(deserialize_feature_image(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(deserialize_feature_image(&bad).is_err());
    }

    #[test]
    fn reader_skips_a_truncated_record() {
        let a = serialize_feature_image(&image(0, 0.0)).unwrap();
        let b = serialize_feature_image(&image(1, 1.0)).unwrap();
        let c = serialize_feature_image(&image(2, 2.0)).unwrap();
        let mut stream = a.clone();
        stream.extend_from_slice(&b[..40]);
        stream.extend_from_slice(&c);
        let mut r = FeatureImageReader::new(stream.as_slice());
        let got: Vec<u32> = r.by_ref().map(|f| f.unwrap().frame_id).collect();
        assert_eq!(got, vec![0, 2]);
        assert_eq!(r.warnings(), 1);
    }

    #[test]
    fn reader_skips_garbage_and_short_tail() {
        let a = serialize_feature_image(&image(3, 0.5)).unwrap();
        let mut stream = vec![1, 2, 3];
        stream.extend_from_slice(&a);
        stream.extend_from_slice(&a[..10]);
        let mut r = FeatureImageReader::new(stream.as_slice());
        assert_eq!(r.next_image().unwrap().unwrap().frame_id, 3);
        assert!(r.next_image().unwrap().is_none());
        assert_eq!(r.warnings(), 2);
    }

    #[test]
    fn digest_mismatch_is_fatal() {
        let a = serialize_feature_image(&image(0, 0.0)).unwrap();
        let mut r = FeatureImageReader::new(a.as_slice()).expect_digest(1);
        assert!(matches!(
            r.next_image(),
            Err(PipelineError::IncompatibleCheckpoint { expected: 1, .. })
        ));
    }
}
