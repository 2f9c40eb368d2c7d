use super::{PipelineError, Result, RunConfig};
use crate::csiprep::{
    assemble_batch, compute_norm_stats, frame_windows, parse_capture, preprocess, usable_mask, CsiFrame, CsiFrameBatch,
    Mode, NormStats,
};
use crate::syndata::{generate_dataset, split_frames};
use crate::tensor::Tensor;
use crate::Scalar;

/// Split frames plus the statistics used to standardise them.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<CsiFrame>,
    pub val: Vec<CsiFrame>,
    pub test: Vec<CsiFrame>,
    pub mode: Mode,
    /// From the training frames only.
    pub norm_stats: NormStats,
    pub n_classes: usize,
}

/// Keep at most `limit` frames, taking classes in turn.
fn balanced_prefix(frames: Vec<CsiFrame>, limit: usize) -> Vec<CsiFrame> {
    let n_classes = frames.iter().map(|f| f.label as usize + 1).max().unwrap_or(0);
    let mut queues: Vec<Vec<CsiFrame>> = vec![Vec::new(); n_classes];
    for f in frames.into_iter().rev() {
        queues[f.label as usize].push(f);
    }
    let mut out = Vec::with_capacity(limit);
    while out.len() < limit && queues.iter().any(|q| !q.is_empty()) {
        for q in queues.iter_mut() {
            if out.len() < limit {
                if let Some(f) = q.pop() {
                    out.push(f);
                }
            }
        }
    }
    out
}

/// Generate or read frames and split them as configured.
pub fn load_data(cfg: &RunConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let d = &cfg.data;
    let (frames, split) = if d.captures.is_empty() {
        let spec = d.synth.as_ref().expect("validated");
        let ds = generate_dataset(spec, d.frame_len, d.stride, d.split_seed)?;
        (ds.frames, ds.split)
    } else {
        let mut frames = Vec::new();
        for path in &d.captures {
            let capture = parse_capture(path)?;
            let mask = usable_mask(capture.n_subcarriers)?;
            frames.extend(frame_windows(&preprocess(&capture, &mask)?, d.frame_len, d.stride)?);
        }
        let labels: Vec<u8> = frames.iter().map(|f| f.label).collect();
        let split = split_frames(&labels, d.split_seed);
        (frames, split)
    };
    let pick = |idx: &[usize]| -> Vec<CsiFrame> { idx.iter().map(|&i| frames[i].clone()).collect() };
    let mut train = pick(&split.train);
    if let Some(limit) = d.train_limit {
        train = balanced_prefix(train, limit);
    }
    if train.is_empty() {
        return Err(PipelineError::Config("no training frames".into()));
    }
    let channels = d.mode.channels(train[0].n_antennas);
    if channels != cfg.model.in_channels {
        return Err(PipelineError::Config(format!(
            "{:?} mode yields {channels} channels, model expects {}",
            d.mode, cfg.model.in_channels
        )));
    }
    if train[0].n_subcarriers > cfg.model.input[0] {
        return Err(PipelineError::Config(format!(
            "{} subcarriers exceed the model extent {}",
            train[0].n_subcarriers, cfg.model.input[0]
        )));
    }
    let norm_stats = compute_norm_stats(&train, d.mode)?;
    let n_classes = frames.iter().map(|f| f.label as usize + 1).max().unwrap_or(0);
    let val = if d.eval_on_train {
        train.clone()
    } else {
        pick(&split.val)
    };
    Ok(PreparedData {
        val,
        test: pick(&split.test),
        train,
        mode: d.mode,
        norm_stats,
        n_classes,
    })
}

/// Standardise `frames` and zero-pad them to the model extents `[S, T]`.
pub fn to_batch<T: Scalar>(
    frames: &[CsiFrame],
    mode: Mode,
    stats: &NormStats,
    input: [usize; 2],
) -> Result<CsiFrameBatch<T>> {
    let mut batch = assemble_batch::<T>(frames, mode, Some(stats))?;
    let shape = batch.data.shape().to_vec();
    let (b, d, s, t) = (shape[0], shape[1], shape[2], shape[3]);
    if [s, t] == input {
        return Ok(batch);
    }
    if s > input[0] || t > input[1] {
        return Err(PipelineError::Config(format!(
            "frame {s}×{t} exceeds model input {input:?}"
        )));
    }
    let mut data = vec![T::zero(); b * d * input[0] * input[1]];
    for (plane, src) in batch.data.data().chunks(s * t).enumerate() {
        for (row, values) in src.chunks(t).enumerate() {
            let dst = (plane * input[0] + row) * input[1];
            data[dst..dst + t].copy_from_slice(values);
        }
    }
    batch.data = Tensor::new(vec![b, d, input[0], input[1]], data)?;
    Ok(batch)
}

/// Crop `[B, D, S', T']` back to the top-left `[S, T]`.
pub(crate) fn crop<T: Scalar>(x: &Tensor<T>, extent: [usize; 2]) -> Tensor<T> {
    let shape = x.shape();
    let (b, d, s, t) = (shape[0], shape[1], shape[2], shape[3]);
    if [s, t] == extent {
        return x.clone();
    }
    let mut out = Vec::with_capacity(b * d * extent[0] * extent[1]);
    for plane in x.data().chunks(s * t) {
        for row in plane.chunks(t).take(extent[0]) {
            out.extend_from_slice(&row[..extent[1]]);
        }
    }
    Tensor::new(vec![b, d, extent[0], extent[1]], out).expect("crop shape")
}
