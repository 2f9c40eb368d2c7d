use std::fs::File;
use std::io::{BufWriter, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::data::{to_batch, PreparedData};
use super::metrics::{evaluate_classifier, evaluate_reconstruction, Db, MetricsReport};
use super::{PipelineError, Result, RunConfig};
use crate::csiprep::CsiFrameBatch;
use crate::model::{nmse_db, nmse_loss, ModelError, SwinFi};
use crate::tensor::{adam_step, AdamState, Graph, ParamId, Tensor, TensorError};

/// Steps the loss may stay above ten times its initial value.
const DIVERGENCE_PATIENCE: u64 = 100;

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Result of autoencoder training; `model` holds the best validation weights.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SwinFi<f32>,
    pub best_step: u64,
    pub best_nmse_db: f64,
    pub steps_run: u64,
    pub reached_target: bool,
    pub history: Vec<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub model: SwinFi<f32>,
    pub test_accuracy_pct: f64,
    pub confusion: Vec<Vec<u64>>,
    pub history: Vec<MetricsReport>,
}

struct MetricsSink {
    out: Option<BufWriter<File>>,
    start: Instant,
    deterministic: bool,
    history: Vec<MetricsReport>,
}

impl MetricsSink {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let out = match &cfg.io.metrics {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                Some(BufWriter::new(File::create(p)?))
            }
            None => None,
        };
        Ok(Self {
            out,
            start: Instant::now(),
            deterministic: cfg.deterministic,
            history: Vec::new(),
        })
    }

    fn wall_time(&self) -> f64 {
        if self.deterministic {
            0.0
        } else {
            self.start.elapsed().as_secs_f64()
        }
    }

    fn push(&mut self, mut r: MetricsReport) -> Result<()> {
        r.wall_time = self.wall_time();
        if let Some(out) = &mut self.out {
            writeln!(out, "{}", r.to_json_line())?;
            out.flush()?;
        }
        self.history.push(r);
        Ok(())
    }
}

fn diverged(step: u64, e: PipelineError) -> PipelineError {
    match e {
        PipelineError::Tensor(TensorError::NonFinite { .. })
        | PipelineError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => PipelineError::Diverged {
            step,
            reason: e.to_string(),
        },
        other => other,
    }
}

/// Rows `idx` of a `[B, …]` tensor.
fn select(x: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let per = x.numel() / x.shape()[0];
    let mut data = Vec::with_capacity(per * idx.len());
    for &i in idx {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("selection shape")
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
fn clip_global(grads: &mut [Option<Tensor<f32>>], ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = ids
        .iter()
        .filter_map(|id| grads[id.index()].as_ref())
        .flat_map(|t| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for id in ids {
            if let Some(t) = &mut grads[id.index()] {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Epoch-shuffled mini-batches of `0..n`.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            size: size.min(n),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.pos = b.order.len();
        b
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        out
    }
}

/// Train encoder and decoder on NMSE with Adam, cosine decay and global
/// gradient clipping. Evaluates every `eval_every` steps and keeps the best
/// weights, writing them to `io.checkpoint` when set.
pub fn train_autoencoder(cfg: &RunConfig, data: &PreparedData, init: Option<SwinFi<f32>>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let mut model = match init {
        Some(m) => {
            if m.digest() != cfg.model.digest() {
                return Err(PipelineError::IncompatibleCheckpoint {
                    expected: cfg.model.digest(),
                    found: m.digest(),
                });
            }
            m
        }
        None => SwinFi::new(cfg.model.clone(), tc.seed)?,
    };
    let extent = [data.train[0].n_subcarriers, cfg.data.frame_len];
    let train = to_batch::<f32>(&data.train, data.mode, &data.norm_stats, cfg.model.input)?;
    let val = to_batch::<f32>(&data.val, data.mode, &data.norm_stats, cfg.model.input)?;
    let ids = model.autoencoder_ids();
    let mut adam = AdamState::new(model.params(), ids.clone(), tc.lr);
    let mut batcher = Batcher::new(train.len(), tc.batch_size, tc.seed);
    let mut sink = MetricsSink::new(cfg)?;

    let mut best = (f64::INFINITY, 0u64, model.clone());
    let mut initial_loss = None;
    let mut above = 0u64;
    let mut reached_target = false;
    let mut step = 0u64;
    while step < tc.max_steps {
        let idx = batcher.next();
        let x = select(&train.data, &idx);
        adam.lr = cosine_lr(tc.lr, step, tc.max_steps);
        let (loss, mut grads) = (|| -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let z = model.encode_graph(&mut g, xv)?;
            let y = model.decode_graph(&mut g, z)?;
            let loss = nmse_loss(&mut g, y, xv)?;
            let lv = g.value(loss).data()[0] as f64;
            g.backward(loss)?;
            Ok((lv, g.param_grads(model.params())))
        })()
        .map_err(|e| diverged(step, e))?;
        if !loss.is_finite() {
            return Err(PipelineError::Diverged {
                step,
                reason: format!("loss became {loss}"),
            });
        }
        let first = *initial_loss.get_or_insert(loss);
        above = if loss > 10.0 * first { above + 1 } else { 0 };
        if above >= DIVERGENCE_PATIENCE {
            return Err(PipelineError::Diverged {
                step,
                reason: format!("loss stayed above 10× its initial value {first:.4} for {DIVERGENCE_PATIENCE} steps"),
            });
        }
        clip_global(&mut grads, &ids, tc.clip_norm);
        adam_step(model.params_mut(), &grads, &mut adam).map_err(|e| diverged(step, e.into()))?;
        step += 1;

        if step.is_multiple_of(tc.eval_every) || step == tc.max_steps {
            let (all, usable) = evaluate_reconstruction(&model, &val, extent).map_err(|e| diverged(step, e))?;
            sink.push(MetricsReport {
                step,
                split: "train".into(),
                loss: Some(loss),
                nmse_db: Some(Db(nmse_db(loss))),
                ..Default::default()
            })?;
            sink.push(MetricsReport {
                step,
                split: if cfg.data.eval_on_train { "train_eval" } else { "val" }.into(),
                nmse_db: Some(Db(all)),
                nmse_db_usable: Some(Db(usable)),
                ..Default::default()
            })?;
            if all < best.0 {
                best = (all, step, model.clone());
                if let Some(path) = &cfg.io.checkpoint {
                    save_checkpoint(
                        path,
                        &Checkpoint::from_model(&model, data.mode, Some(data.norm_stats.clone()), step),
                    )?;
                }
            }
            if tc.target_nmse_db.is_some_and(|t| all <= t) {
                reached_target = true;
                break;
            }
        }
    }
    if step == 0 {
        return Err(PipelineError::Config("max_steps is zero".into()));
    }
    Ok(TrainOutcome {
        model: best.2,
        best_step: best.1,
        best_nmse_db: best.0,
        steps_run: step,
        reached_target,
        history: sink.history,
    })
}

/// Mean-pooled latent features `[N, C]`, one frame at a time.
fn pooled_features(model: &SwinFi<f32>, batch: &CsiFrameBatch<f32>) -> Result<Tensor<f32>> {
    let c = model.config().embed_dim;
    let mut out = Vec::with_capacity(batch.len() * c);
    for i in 0..batch.len() {
        let fi = model.encode(&select(&batch.data, &[i]), &[i as u32])?;
        let tokens = fi[0].feats.shape()[0];
        let mut sum = vec![0.0f64; c];
        for row in fi[0].feats.data().chunks(c) {
            for (s, &v) in sum.iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        out.extend(sum.iter().map(|s| (s / tokens as f64) as f32));
    }
    Ok(Tensor::new(vec![batch.len(), c], out)?)
}

/// Train the classification head on frozen, cached encoder features; with
/// `joint_finetune` the encoder is then updated through the classification
/// loss as well. Reports accuracy on the test split.
pub fn train_classifier(cfg: &RunConfig, data: &PreparedData, model: SwinFi<f32>) -> Result<ClassifierOutcome> {
    let cc = &cfg.classifier;
    let mut model = model;
    if model.digest() != cfg.model.digest() {
        return Err(PipelineError::IncompatibleCheckpoint {
            expected: cfg.model.digest(),
            found: model.digest(),
        });
    }
    if data.n_classes > model.config().n_classes {
        return Err(PipelineError::Config(format!(
            "{} classes in the data, head has {}",
            data.n_classes,
            model.config().n_classes
        )));
    }
    let train = to_batch::<f32>(&data.train, data.mode, &data.norm_stats, cfg.model.input)?;
    let labels: Vec<usize> = train.labels.iter().map(|&l| l as usize).collect();
    let feats = pooled_features(&model, &train)?;
    let head = model.head_ids();
    let mut adam = AdamState::new(model.params(), head.clone(), cc.lr);
    let mut sink = MetricsSink::new(cfg)?;
    for step in 0..cc.steps {
        let mut g = Graph::new();
        let f = g.constant(feats.clone())?;
        let logits = model.classify_pooled(&mut g, f)?;
        let loss = g.cross_entropy(logits, &labels)?;
        let lv = g.value(loss).data()[0] as f64;
        if !lv.is_finite() {
            return Err(PipelineError::Diverged {
                step,
                reason: format!("classifier loss became {lv}"),
            });
        }
        g.backward(loss)?;
        let grads = g.param_grads(model.params());
        adam_step(model.params_mut(), &grads, &mut adam)?;
        if (step + 1) % cfg.train.eval_every == 0 || step + 1 == cc.steps {
            sink.push(MetricsReport {
                step: step + 1,
                split: "cls_train".into(),
                loss: Some(lv),
                ..Default::default()
            })?;
        }
    }
    if cc.joint_finetune {
        let mut ids = model.autoencoder_ids();
        ids.retain(|&id| model.params().name(id).starts_with("enc."));
        ids.extend(&head);
        let mut adam = AdamState::new(model.params(), ids.clone(), 0.1 * cc.lr);
        let mut batcher = Batcher::new(train.len(), cfg.train.batch_size, cc.seed);
        for step in 0..cc.steps {
            let idx = batcher.next();
            let x = select(&train.data, &idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let z = model.encode_graph(&mut g, xv)?;
            let logits = model.classify_graph(&mut g, z)?;
            let loss = g.cross_entropy(logits, &y)?;
            g.backward(loss)?;
            let mut grads = g.param_grads(model.params());
            clip_global(&mut grads, &ids, cfg.train.clip_norm);
            adam_step(model.params_mut(), &grads, &mut adam).map_err(|e| diverged(step, e.into()))?;
        }
    }
    let test_frames = if data.test.is_empty() { &data.val } else { &data.test };
    let test = to_batch::<f32>(test_frames, data.mode, &data.norm_stats, cfg.model.input)?;
    let (acc, confusion) = evaluate_classifier(&model, &test, data.n_classes)?;
    sink.push(MetricsReport {
        step: cc.steps,
        split: "test".into(),
        accuracy_pct: Some(acc),
        confusion: Some(confusion.clone()),
        ..Default::default()
    })?;
    if let Some(path) = &cfg.io.classifier_checkpoint {
        save_checkpoint(
            path,
            &Checkpoint::from_model(&model, data.mode, Some(data.norm_stats.clone()), cc.steps),
        )?;
    }
    Ok(ClassifierOutcome {
        model,
        test_accuracy_pct: acc,
        confusion,
        history: sink.history,
    })
}
