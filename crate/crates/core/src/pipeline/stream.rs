use std::io::{self, Read, Write};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};

use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use super::data::crop;
use super::metrics::{confusion_matrix, Db, MetricsReport};
use super::wire::{serialize_feature_image, FeatureImageReader};
use super::{PipelineError, Result};
use crate::csiprep::CsiFrameBatch;
use crate::model::{compression_ratio, nmse_db, nmse_ratio, SwinFi};
use crate::tensor::Tensor;

/// Byte accounting of one edge stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub frames_sent: u64,
    /// `frames × D·S·T·4`.
    pub raw_bytes: u64,
    /// Payload plus headers.
    pub compressed_bytes: u64,
    /// `raw_bytes / compressed_bytes`; zero before the first frame.
    pub measured_ratio: f64,
    /// Configured compression ratio.
    pub gamma: f64,
}

impl StreamStats {
    fn update_ratio(&mut self) {
        self.measured_ratio = if self.compressed_bytes == 0 {
            0.0
        } else {
            self.raw_bytes as f64 / self.compressed_bytes as f64
        };
    }
}

/// One `[1, D, S, T]` frame of a batch tensor.
fn frame(x: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let per = x.numel() / x.shape()[0];
    let mut shape = x.shape().to_vec();
    shape[0] = 1;
    Tensor::new(shape, x.data()[i * per..(i + 1) * per].to_vec()).expect("frame shape")
}

/// Encode each frame of `x` on its own, serialise it and write it to `sink`.
/// Frame ids count up from `first_id`.
pub fn edge_encode_stream<W: Write>(
    model: &SwinFi<f32>,
    x: &Tensor<f32>,
    first_id: u32,
    mut sink: W,
) -> Result<StreamStats> {
    let mut stats = StreamStats {
        gamma: compression_ratio(model.config()).to_f64().unwrap_or(f64::NAN),
        ..Default::default()
    };
    let n = if x.ndim() == 4 { x.shape()[0] } else { 0 };
    for i in 0..n {
        let one = frame(x, i);
        let fi = model.encode(&one, &[first_id.wrapping_add(i as u32)])?;
        let bytes = serialize_feature_image(&fi[0])?;
        if let Err(source) = sink.write_all(&bytes) {
            return Err(PipelineError::StreamWrite { stats, source });
        }
        stats.frames_sent += 1;
        stats.raw_bytes += 4 * one.numel() as u64;
        stats.compressed_bytes += bytes.len() as u64;
        stats.update_ratio();
    }
    if let Err(source) = sink.flush() {
        return Err(PipelineError::StreamWrite { stats, source });
    }
    Ok(stats)
}

/// What the cloud side recovered from a stream.
#[derive(Clone, Debug)]
pub struct DecodeOutcome {
    pub frame_ids: Vec<u32>,
    /// `[B, D, S, T]` in arrival order; `None` if no record survived.
    pub reconstruction: Option<Tensor<f32>>,
    /// `[B, n_classes]` when classification was requested.
    pub logits: Option<Tensor<f32>>,
    /// Malformed records skipped.
    pub warnings: u64,
    pub report: MetricsReport,
}

/// Read feature images from `source`, decode each one and, with
/// `classify`, run the head. With a `reference` batch indexed by frame id,
/// reports NMSE over the top-left `extent` and accuracy from its labels.
pub fn cloud_decode_stream<R: Read>(
    model: &SwinFi<f32>,
    source: R,
    classify: bool,
    reference: Option<(&CsiFrameBatch<f32>, [usize; 2])>,
) -> Result<DecodeOutcome> {
    let mut reader = FeatureImageReader::new(source).expect_digest(model.digest());
    let mut ids = Vec::new();
    let mut recon = Vec::new();
    let mut logits = Vec::new();
    while let Some(fi) = reader.next_image()? {
        ids.push(fi.frame_id);
        recon.extend_from_slice(model.decode(std::slice::from_ref(&fi))?.data());
        if classify {
            logits.extend_from_slice(model.classify(std::slice::from_ref(&fi))?.data());
        }
    }
    let cfg = model.config();
    let b = ids.len();
    let reconstruction = (b > 0)
        .then(|| Tensor::new(vec![b, cfg.in_channels, cfg.input[0], cfg.input[1]], recon))
        .transpose()?;
    let logits = (classify && b > 0)
        .then(|| Tensor::new(vec![b, cfg.n_classes], logits))
        .transpose()?;
    let mut report = MetricsReport {
        split: "stream".into(),
        ..Default::default()
    };
    if let (Some((refb, extent)), Some(y)) = (reference, &reconstruction) {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = idx.iter().find(|&&i| i >= refb.len()) {
            return Err(PipelineError::Format(format!("frame id {bad} has no reference frame")));
        }
        let x = Tensor::new(
            y.shape().to_vec(),
            idx.iter().flat_map(|&i| frame(&refb.data, i).into_data()).collect(),
        )?;
        report.nmse_db = Some(Db(nmse_db(nmse_ratio(&crop(&x, extent), &crop(y, extent))?)));
        if let Some(l) = &logits {
            let labels: Vec<u8> = idx.iter().map(|&i| refb.labels[i]).collect();
            let n_classes = cfg
                .n_classes
                .max(labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0));
            let confusion = confusion_matrix(l, &labels, n_classes);
            report.accuracy_pct = Some(super::metrics::accuracy_of(&confusion));
            report.confusion = Some(confusion);
        }
    }
    Ok(DecodeOutcome {
        frame_ids: ids,
        reconstruction,
        logits,
        warnings: reader.warnings(),
        report,
    })
}

/// Writing half of a bounded in-memory byte channel.
pub struct ChannelSink {
    tx: SyncSender<Vec<u8>>,
}

/// Reading half of a bounded in-memory byte channel.
pub struct ChannelSource {
    rx: Receiver<Vec<u8>>,
    pending: Vec<u8>,
    pos: usize,
}

/// A byte pipe holding at most `capacity` writes in flight; writers block
/// when it is full.
pub fn channel_pair(capacity: usize) -> (ChannelSink, ChannelSource) {
    let (tx, rx) = sync_channel(capacity);
    (
        ChannelSink { tx },
        ChannelSource {
            rx,
            pending: Vec::new(),
            pos: 0,
        },
    )
}

impl Write for ChannelSink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "receiver dropped"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Read for ChannelSource {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        while self.pos == self.pending.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.pending = chunk;
                    self.pos = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = buf.len().min(self.pending.len() - self.pos);
        buf[..n].copy_from_slice(&self.pending[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::WIRE_HEADER_LEN;

    fn tiny() -> SwinFi<f32> {
        let cfg = ModelConfig {
            patch: [2, 1],
            window: [2, 4],
            embed_dim: 8,
            depths: vec![2, 2],
            head_dim: 4,
            mlp_ratio: 2,
            n_classes: 3,
            in_channels: 2,
            input: [8, 16],
        };
        SwinFi::new(cfg, 11).unwrap()
    }

    fn input(b: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![b, 2, 8, 16], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0)
    }

    #[test]
    fn stream_matches_in_process_decode() {
        let model = tiny();
        let x = input(3);
        let mut bytes = Vec::new();
        let stats = edge_encode_stream(&model, &x, 0, &mut bytes).unwrap();
        assert_eq!(stats.frames_sent, 3);
        assert_eq!(stats.raw_bytes, 3 * 2 * 8 * 16 * 4);
        assert_eq!(stats.compressed_bytes, 3 * (WIRE_HEADER_LEN as u64 + 2 * 8 * 8 * 4));
        assert!(stats.measured_ratio <= stats.gamma);
        let out = cloud_decode_stream(&model, bytes.as_slice(), true, None).unwrap();
        assert_eq!(out.frame_ids, vec![0, 1, 2]);
        assert_eq!(out.warnings, 0);
        let y = out.reconstruction.unwrap();
        for i in 0..3 {
            let fi = model.encode(&frame(&x, i), &[i as u32]).unwrap();
            assert_eq!(model.decode(&fi).unwrap().data(), frame(&y, i).data());
            assert_eq!(
                model.classify(&fi).unwrap().data(),
                &out.logits.as_ref().unwrap().data()[3 * i..3 * i + 3]
            );
        }
    }

    #[test]
    fn empty_stream_and_failing_sink() {
        let model = tiny();
        let stats = edge_encode_stream(&model, &Tensor::zeros(vec![0, 2, 8, 16]), 0, io::sink()).unwrap();
        assert_eq!(stats.frames_sent, 0);
        assert_eq!(stats.measured_ratio, 0.0);

        struct Broken(usize);
        impl Write for Broken {
            fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
                if self.0 == 0 {
                    return Err(io::Error::other("disk full"));
                }
                self.0 -= 1;
                Ok(buf.len())
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        match edge_encode_stream(&model, &input(3), 0, Broken(2)) {
            Err(PipelineError::StreamWrite { stats, .. }) => assert_eq!(stats.frames_sent, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_middle_record_is_skipped() {
        let model = tiny();
        let mut bytes = Vec::new();
        edge_encode_stream(&model, &input(3), 0, &mut bytes).unwrap();
        let rec = bytes.len() / 3;
        bytes[rec] = b'X';
        let out = cloud_decode_stream(&model, bytes.as_slice(), false, None).unwrap();
        assert_eq!(out.frame_ids, vec![0, 2]);
        assert_eq!(out.warnings, 1);
    }

    #[test]
    fn channel_carries_stream_between_threads() {
        let model = tiny();
        let x = input(4);
        let (sink, source) = channel_pair(1);
        let edge_model = model.clone();
        let edge_x = x.clone();
        let edge = std::thread::spawn(move || edge_encode_stream(&edge_model, &edge_x, 0, sink).unwrap());
        let out = cloud_decode_stream(&model, source, false, None).unwrap();
        let stats = edge.join().unwrap();
        assert_eq!(stats.frames_sent, 4);
        assert_eq!(out.frame_ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn foreign_digest_is_rejected() {
        let model = tiny();
        let mut bytes = Vec::new();
        edge_encode_stream(&model, &input(1), 0, &mut bytes).unwrap();
        let mut other = model.config().clone();
        other.n_classes = 4;
        let other = SwinFi::<f32>::new(other, 0).unwrap();
        assert!(matches!(
            cloud_decode_stream(&other, bytes.as_slice(), false, None),
            Err(PipelineError::IncompatibleCheckpoint { .. })
        ));
    }
}
