//! Model checkpoints.
//!
//! ```text
//! "SWCK" | u8 version | u64 config digest
//! u32 n | n bytes of JSON metadata (config, mode, norm stats, step)
//! u32 count | per parameter: u16 name len, name, u8 ndim, u32 dims…, f32 data
//! 32-byte SHA-256 of everything above
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PipelineError, Result};
use crate::csiprep::{Mode, NormStats};
use crate::model::{ModelConfig, SwinFi};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SWCK";
const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    mode: Mode,
    norm_stats: Option<NormStats>,
    step: u64,
}

/// Parameters plus everything needed to rebuild and feed the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub mode: Mode,
    pub norm_stats: Option<NormStats>,
    pub step: u64,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &SwinFi<f32>, mode: Mode, norm_stats: Option<NormStats>, step: u64) -> Self {
        Self {
            model: model.config().clone(),
            mode,
            norm_stats,
            step,
            params: model
                .params()
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Rebuild the model. With `expected`, the stored config must have that
    /// digest.
    pub fn to_model(&self, expected: Option<u64>) -> Result<SwinFi<f32>> {
        let found = self.model.digest();
        if let Some(expected) = expected {
            if expected != found {
                return Err(PipelineError::IncompatibleCheckpoint { expected, found });
            }
        }
        let mut model = SwinFi::new(self.model.clone(), 0)?;
        model.load_params(self.params.clone())?;
        Ok(model)
    }
}

fn format_err(m: impl Into<String>) -> PipelineError {
    PipelineError::Format(m.into())
}

/// Serialise to bytes, SHA-256 trailer included.
pub fn write_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Meta {
        model: ck.model.clone(),
        mode: ck.mode,
        norm_stats: ck.norm_stats.clone(),
        step: ck.step,
    })
    .map_err(|e| format_err(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&ck.model.digest().to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, t) in &ck.params {
        let name_len = u16::try_from(name.len()).map_err(|_| format_err("parameter name too long"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let hash = Sha256::digest(&out);
    out.extend_from_slice(&hash);
    Ok(out)
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| format_err("checkpoint truncated"))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse and verify checkpoint bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 + 1 + 8 + 32 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err("not a checkpoint (missing SWCK magic)"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(format_err("checkpoint checksum mismatch"));
    }
    let mut c = Cursor { b: body, pos: 4 };
    let version = c.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let stored_digest = c.u64()?;
    let meta_len = c.u32()? as usize;
    let meta: Meta = serde_json::from_slice(c.take(meta_len)?).map_err(|e| format_err(e.to_string()))?;
    let found = meta.model.digest();
    if found != stored_digest {
        return Err(PipelineError::IncompatibleCheckpoint {
            expected: stored_digest,
            found,
        });
    }
    let count = c.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| format_err("parameter name is not UTF-8"))?
            .to_string();
        let ndim = c.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(4 * n)?
            .chunks_exact(4)
            .map(|v| f32::from_le_bytes(v.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != body.len() {
        return Err(format_err("trailing bytes after parameters"));
    }
    Ok(Checkpoint {
        model: meta.model,
        mode: meta.mode,
        norm_stats: meta.norm_stats,
        step: meta.step,
        params,
    })
}

/// Write via a temporary sibling and rename, so readers never see a
/// partial file.
pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(ck)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SwinFi<f32> {
        let cfg = ModelConfig {
            patch: [2, 1],
            window: [2, 4],
            embed_dim: 8,
            depths: vec![2],
            head_dim: 4,
            mlp_ratio: 2,
            n_classes: 3,
            in_channels: 2,
            input: [8, 16],
        };
        SwinFi::new(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_through_file() {
        let model = tiny();
        let stats = NormStats {
            mean: vec![1.0, 2.0],
            std: vec![0.5, 0.25],
        };
        let ck = Checkpoint::from_model(&model, Mode::Amplitude, Some(stats), 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.swck");
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.to_model(Some(model.digest())).unwrap();
        assert_eq!(rebuilt.params(), model.params());
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn corruption_and_mismatch_are_detected() {
        let model = tiny();
        let ck = Checkpoint::from_model(&model, Mode::Phase, None, 0);
        let mut bytes = write_checkpoint(&ck).unwrap();
        assert_eq!(read_checkpoint(&bytes).unwrap(), ck);
        assert!(matches!(
            ck.to_model(Some(model.digest() ^ 1)),
            Err(PipelineError::IncompatibleCheckpoint { .. })
        ));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(read_checkpoint(&bytes), Err(PipelineError::Format(_))));
        assert!(read_checkpoint(b"nope").is_err());
    }

    #[test]
    fn writes_are_deterministic() {
        let a = write_checkpoint(&Checkpoint::from_model(&tiny(), Mode::Amplitude, None, 5)).unwrap();
        let b = write_checkpoint(&Checkpoint::from_model(&tiny(), Mode::Amplitude, None, 5)).unwrap();
        assert_eq!(a, b);
    }
}
