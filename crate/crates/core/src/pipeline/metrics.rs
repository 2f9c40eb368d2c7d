use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::data::crop;
use super::Result;
use crate::csiprep::CsiFrameBatch;
use crate::model::{nmse_db, nmse_ratio, ModelError, SwinFi, NMSE_DB_NEG_INF};
use crate::tensor::Tensor;

/// A decibel value whose `-inf` survives JSON as the string `"-inf"`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Db(pub f64);

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0 == f64::NEG_INFINITY {
            s.serialize_str(NMSE_DB_NEG_INF)
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Db(v)),
            Raw::Text(t) if t == NMSE_DB_NEG_INF => Ok(Db(f64::NEG_INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected dB value {t:?}"))),
        }
    }
}

/// One evaluation record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: u64,
    /// Seconds since the run started; zero in deterministic mode.
    pub wall_time: f64,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    /// NMSE over every subcarrier row of the standardised tensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmse_db: Option<Db>,
    /// NMSE over usable rows only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmse_db_usable: Option<Db>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_pct: Option<f64>,
    /// `confusion[true][predicted]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<Vec<u64>>>,
}

impl MetricsReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialise")
    }
}

/// `confusion[true][predicted]` from logits `[B, K]`.
pub fn confusion_matrix(logits: &Tensor<f32>, labels: &[u8], n_classes: usize) -> Vec<Vec<u64>> {
    let k = logits.shape()[1];
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let pred = row
            .iter()
            .enumerate()
            .fold(
                (0, f32::NEG_INFINITY),
                |best, (i, &v)| if v > best.1 { (i, v) } else { best },
            )
            .0;
        m[label as usize][pred.min(n_classes - 1)] += 1;
    }
    m
}

fn accuracy(confusion: &[Vec<u64>]) -> f64 {
    let total: u64 = confusion.iter().flatten().sum();
    let hit: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    if total == 0 {
        0.0
    } else {
        100.0 * hit as f64 / total as f64
    }
}

fn usable_rows(x: &Tensor<f32>, usable: &[bool]) -> Tensor<f32> {
    let shape = x.shape();
    let t = shape[3];
    let data = x
        .data()
        .chunks(t)
        .enumerate()
        .filter(|(r, _)| usable[r % shape[2]])
        .flat_map(|(_, row)| row.to_vec())
        .collect::<Vec<_>>();
    let rows = data.len() / t;
    Tensor::new(vec![rows, t], data).expect("row shape")
}

/// Reconstruction NMSE of `batch` over all rows and over usable rows. The
/// batch may be padded; metrics use the frame extent `extent`.
pub fn evaluate_reconstruction(
    model: &SwinFi<f32>,
    batch: &CsiFrameBatch<f32>,
    extent: [usize; 2],
) -> Result<(f64, f64)> {
    let mut recon = Vec::with_capacity(batch.data.numel());
    // One frame at a time keeps the inference graph small.
    let per = batch.data.numel() / batch.len();
    let shape = batch.data.shape()[1..].to_vec();
    for frame in batch.data.data().chunks(per) {
        let x = Tensor::new([vec![1], shape.clone()].concat(), frame.to_vec())?;
        recon.extend_from_slice(model.reconstruct(&x)?.data());
    }
    let recon = Tensor::new(batch.data.shape().to_vec(), recon)?;
    let (x, y) = (crop(&batch.data, extent), crop(&recon, extent));
    let all = nmse_db(nmse_ratio(&x, &y)?);
    let usable = nmse_db(nmse_ratio(
        &usable_rows(&x, &batch.usable),
        &usable_rows(&y, &batch.usable),
    )?);
    Ok((all, usable))
}

/// Accuracy and confusion of the classifier head on `batch`.
pub fn evaluate_classifier(
    model: &SwinFi<f32>,
    batch: &CsiFrameBatch<f32>,
    n_classes: usize,
) -> Result<(f64, Vec<Vec<u64>>)> {
    if batch.is_empty() {
        return Err(ModelError::Config("empty evaluation batch".into()).into());
    }
    let per = batch.data.numel() / batch.len();
    let shape = batch.data.shape()[1..].to_vec();
    let mut logits = Vec::new();
    for (i, frame) in batch.data.data().chunks(per).enumerate() {
        let x = Tensor::new([vec![1], shape.clone()].concat(), frame.to_vec())?;
        let fi = model.encode(&x, &[i as u32])?;
        logits.extend_from_slice(model.classify(&fi)?.data());
    }
    let k = model.config().n_classes;
    let logits = Tensor::new(vec![batch.len(), k], logits)?;
    let confusion = confusion_matrix(&logits, &batch.labels, n_classes.max(k));
    Ok((accuracy(&confusion), confusion))
}

pub(crate) fn accuracy_of(confusion: &[Vec<u64>]) -> f64 {
    accuracy(confusion)
}
