use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{generate_capture, Result, SynthSpec};
use crate::csiprep::{frame_windows, preprocess, usable_mask, CsiFrame};

/// Frame indices of each partition.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub frames: Vec<CsiFrame>,
    pub split: Split,
}

impl SynthDataset {
    pub fn subset(&self, idx: &[usize]) -> Vec<CsiFrame> {
        idx.iter().map(|&i| self.frames[i].clone()).collect()
    }
}

/// Split frames 70/15/15 within each class. Indices in each partition are
/// ascending.
pub fn split_frames(labels: &[u8], seed: u64) -> Split {
    let n_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut split = Split::default();
    for class in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] as usize == class).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (0.7 * n as f64).round() as usize;
        let n_val = ((0.15 * n as f64).round() as usize).min(n - n_train);
        split.train.extend_from_slice(&idx[..n_train]);
        split.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        split.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Generate every class, preprocess with the default mask for the
/// subcarrier count, cut frames of `frame_len` packets every `stride`, and
/// split them with `split_seed`.
pub fn generate_dataset(spec: &SynthSpec, frame_len: usize, stride: usize, split_seed: u64) -> Result<SynthDataset> {
    spec.validate()?;
    let mask = usable_mask(spec.n_subcarriers)?;
    let per_class: Vec<Vec<CsiFrame>> = (0..spec.n_classes)
        .into_par_iter()
        .map(|class| {
            let capture = generate_capture(spec, class)?;
            let processed = preprocess(&capture, &mask)?;
            Ok(frame_windows(&processed, frame_len, stride)?)
        })
        .collect::<Result<_>>()?;
    let frames: Vec<CsiFrame> = per_class.into_iter().flatten().collect();
    let labels: Vec<u8> = frames.iter().map(|f| f.label).collect();
    Ok(SynthDataset {
        spec: spec.clone(),
        split: split_frames(&labels, split_seed),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_counts_and_split() {
        let mut spec = SynthSpec::desk(3, 64);
        spec.packets_per_class = 4096;
        let ds = generate_dataset(&spec, 256, 256, 0).unwrap();
        assert_eq!(ds.frames.len(), 128);
        let s = &ds.split;
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 128);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..128).collect::<Vec<_>>());
        for class in 0..8u8 {
            let count = |idx: &[usize]| idx.iter().filter(|&&i| ds.frames[i].label == class).count();
            assert_eq!((count(&s.train), count(&s.val), count(&s.test)), (11, 2, 3));
        }
    }

    #[test]
    fn split_seed_changes_membership_only() {
        let labels: Vec<u8> = (0..60).map(|i| (i % 3) as u8).collect();
        let a = split_frames(&labels, 1);
        let b = split_frames(&labels, 2);
        assert_ne!(a, b);
        for class in 0..3u8 {
            let count = |idx: &[usize]| idx.iter().filter(|&&i| labels[i] == class).count();
            assert_eq!(count(&a.train), count(&b.train));
            assert_eq!(count(&a.val), count(&b.val));
            assert_eq!(count(&a.test), count(&b.test));
        }
        assert_eq!(split_frames(&labels, 1), a);
        assert_eq!(split_frames(&[], 1), Split::default());
    }
}
