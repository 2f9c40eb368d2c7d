use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::block::{swin_block, BlockParams};
use super::layers::Linear;
use super::resample::{patch_embed, patch_merge, patch_split, unembed};
use super::{ModelConfig, ModelError, Result, StageGeometry};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::Scalar;

/// Latent produced by the encoder for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage<T> {
    /// Final patch grid `[g_S, g_T]`.
    pub grid: [usize; 2],
    pub channels: usize,
    /// `[g_S·g_T, C]`, tokens subcarrier-major.
    pub feats: Tensor<T>,
    pub frame_id: u32,
    pub config_digest: u64,
}

impl<T: Scalar> FeatureImage<T> {
    pub fn numel(&self) -> usize {
        self.feats.numel()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    grid: [usize; 2],
    blocks: Vec<BlockParams>,
}

/// Encoder, decoder and classifier head sharing one parameter store.
///
/// Parameter names start with `enc.`, `dec.` or `head.`.
#[derive(Clone, Debug)]
pub struct SwinFi<T> {
    cfg: ModelConfig,
    digest: u64,
    store: ParamStore<T>,
    embed: Linear,
    encoder: Vec<Stage>,
    merges: Vec<Linear>,
    decoder: Vec<Stage>,
    splits: Vec<Linear>,
    unembed: Linear,
    head: Linear,
}

fn build_stage<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
    geo: StageGeometry,
    depth: usize,
    rng: &mut R,
) -> Stage {
    let blocks = (0..depth)
        .map(|j| {
            BlockParams::new(
                store,
                &format!("{prefix}.block{j}"),
                cfg.embed_dim,
                cfg.head_dim,
                cfg.mlp_ratio,
                cfg.window,
                geo,
                j % 2 == 1,
                rng,
            )
        })
        .collect();
    Stage { grid: geo.grid, blocks }
}

impl<T: Scalar> SwinFi<T> {
    /// Fresh model with weights drawn from a ChaCha8 stream seeded by `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_rng(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let f = cfg.patch_features();
        let stages = cfg.stages();
        let n = stages.len();
        let mut store = ParamStore::new();

        let embed = Linear::new(&mut store, "enc.embed", f, c, true, rng);
        let mut encoder = Vec::with_capacity(n);
        let mut merges = Vec::with_capacity(n - 1);
        for (i, geo) in stages.iter().enumerate() {
            encoder.push(build_stage(
                &mut store,
                &format!("enc.stage{i}"),
                &cfg,
                *geo,
                cfg.depths[i],
                rng,
            ));
            if i + 1 < n {
                merges.push(Linear::new(&mut store, &format!("enc.merge{i}"), 4 * c, c, false, rng));
            }
        }
        let mut decoder = Vec::with_capacity(n);
        let mut splits = Vec::with_capacity(n - 1);
        for i in 0..n {
            let src = n - 1 - i;
            decoder.push(build_stage(
                &mut store,
                &format!("dec.stage{i}"),
                &cfg,
                stages[src],
                cfg.depths[src],
                rng,
            ));
            if i + 1 < n {
                splits.push(Linear::new(&mut store, &format!("dec.split{i}"), c, 4 * c, false, rng));
            }
        }
        let unembed = Linear::new(&mut store, "dec.unembed", c, f, true, rng);
        let head = Linear::new(&mut store, "head.fc", c, cfg.n_classes, true, rng);
        Ok(Self {
            digest: cfg.digest(),
            cfg,
            store,
            embed,
            encoder,
            merges,
            decoder,
            splits,
            unembed,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Encoder and decoder parameters.
    pub fn autoencoder_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| !self.store.name(id).starts_with("head."))
            .collect()
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("head.").collect()
    }

    /// Same structure with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> SwinFi<U> {
        SwinFi {
            cfg: self.cfg.clone(),
            digest: self.digest,
            store: self.store.cast(),
            embed: self.embed,
            encoder: self.encoder.clone(),
            merges: self.merges.clone(),
            decoder: self.decoder.clone(),
            splits: self.splits.clone(),
            unembed: self.unembed,
            head: self.head,
        }
    }

    /// Replace every parameter by name; names and shapes must match exactly.
    pub fn load_params(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.store.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, found {}",
                self.store.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .store
                .find(&name)
                .ok_or_else(|| ModelError::Config(format!("unknown parameter {name}")))?;
            self.store.set(id, value)?;
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let expected = [self.cfg.in_channels, self.cfg.input[0], self.cfg.input[1]];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(ModelError::Config(format!(
                "input {shape:?} does not match [B, {}, {}, {}]",
                expected[0], expected[1], expected[2]
            )));
        }
        Ok(())
    }

    /// With `compact`, an inference graph drops everything but the current
    /// activation after each block; earlier handles become invalid.
    fn run_stage(&self, g: &mut Graph<T>, stage: &Stage, mut x: Var, compact: bool) -> Result<Var> {
        for block in &stage.blocks {
            x = swin_block(g, &self.store, block, x)?;
            if compact && !g.is_recording() {
                x = g.retain(x);
            }
        }
        Ok(x)
    }

    /// `[B, D, S, T]` to latent tokens `[B, g_S·g_T, C]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.encode_inner(g, x, false)
    }

    fn encode_inner(&self, g: &mut Graph<T>, x: Var, compact: bool) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let mut h = patch_embed(g, &self.store, &self.embed, x, self.cfg.patch)?;
        for (i, stage) in self.encoder.iter().enumerate() {
            h = self.run_stage(g, stage, h, compact)?;
            if let Some(merge) = self.merges.get(i) {
                h = patch_merge(g, &self.store, merge, h, stage.grid)?;
            }
        }
        Ok(h)
    }

    /// Latent tokens `[B, g_S·g_T, C]` to `[B, D, S, T]`.
    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        self.decode_inner(g, z, false)
    }

    fn decode_inner(&self, g: &mut Graph<T>, z: Var, compact: bool) -> Result<Var> {
        let mut h = z;
        for (i, stage) in self.decoder.iter().enumerate() {
            h = self.run_stage(g, stage, h, compact)?;
            if let Some(split) = self.splits.get(i) {
                h = patch_split(g, &self.store, split, h, stage.grid)?;
            }
        }
        unembed(
            g,
            &self.store,
            &self.unembed,
            h,
            self.cfg.in_channels,
            self.cfg.input,
            self.cfg.patch,
        )
    }

    /// Mean-pool latent tokens and map to `[B, n_classes]` logits.
    pub fn classify_graph(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let pooled = g.mean(z, 1)?;
        self.classify_pooled(g, pooled)
    }

    /// Logits from already pooled `[B, C]` features.
    pub fn classify_pooled(&self, g: &mut Graph<T>, pooled: Var) -> Result<Var> {
        Ok(self.head.forward(g, &self.store, pooled)?)
    }

    /// Encode a batch; `frame_ids` has one entry per frame.
    pub fn encode(&self, x: &Tensor<T>, frame_ids: &[u32]) -> Result<Vec<FeatureImage<T>>> {
        self.check_input(x.shape())?;
        let b = x.shape()[0];
        if frame_ids.len() != b {
            return Err(ModelError::Config(format!(
                "{} frame ids for a batch of {b}",
                frame_ids.len()
            )));
        }
        let mut g = Graph::inference();
        let xv = g.constant(x.clone())?;
        let z = self.encode_inner(&mut g, xv, true)?;
        let z = g.take_value(z);
        let grid = self.cfg.latent_grid();
        let per = z.numel() / b;
        Ok(z.data()
            .chunks(per)
            .zip(frame_ids)
            .map(|(feats, &frame_id)| FeatureImage {
                grid,
                channels: self.cfg.embed_dim,
                feats: Tensor::new(vec![grid[0] * grid[1], self.cfg.embed_dim], feats.to_vec()).expect("latent shape"),
                frame_id,
                config_digest: self.digest,
            })
            .collect())
    }

    fn stack(&self, fis: &[FeatureImage<T>]) -> Result<Tensor<T>> {
        let grid = self.cfg.latent_grid();
        let c = self.cfg.embed_dim;
        if fis.is_empty() {
            return Err(ModelError::Config("empty feature-image batch".into()));
        }
        let mut data = Vec::with_capacity(fis.len() * grid[0] * grid[1] * c);
        for fi in fis {
            if fi.config_digest != self.digest {
                return Err(ModelError::IncompatibleCheckpoint {
                    expected: self.digest,
                    found: fi.config_digest,
                });
            }
            if fi.grid != grid || fi.channels != c || fi.feats.numel() != grid[0] * grid[1] * c {
                return Err(ModelError::Config(format!(
                    "feature image {}×{}×{} does not match {}×{}×{c}",
                    fi.grid[0], fi.grid[1], fi.channels, grid[0], grid[1]
                )));
            }
            data.extend_from_slice(fi.feats.data());
        }
        Ok(Tensor::new(vec![fis.len(), grid[0] * grid[1], c], data)?)
    }

    /// Reconstruct `[B, D, S, T]` from feature images of this model.
    pub fn decode(&self, fis: &[FeatureImage<T>]) -> Result<Tensor<T>> {
        let z = self.stack(fis)?;
        let mut g = Graph::inference();
        let zv = g.constant(z)?;
        let y = self.decode_inner(&mut g, zv, true)?;
        Ok(g.take_value(y))
    }

    /// `[B, n_classes]` logits.
    pub fn classify(&self, fis: &[FeatureImage<T>]) -> Result<Tensor<T>> {
        let z = self.stack(fis)?;
        let mut g = Graph::inference();
        let zv = g.constant(z)?;
        let y = self.classify_graph(&mut g, zv)?;
        Ok(g.take_value(y))
    }

    /// `decode(encode(x))` without leaving the graph.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone())?;
        let z = self.encode_inner(&mut g, xv, true)?;
        let y = self.decode_inner(&mut g, z, true)?;
        Ok(g.take_value(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compression_ratio, ModelConfig};
    use crate::tensor::{grad_check_params, trunc_normal};
    use num_rational::Ratio;

    fn tiny() -> ModelConfig {
        ModelConfig {
            patch: [2, 1],
            window: [2, 4],
            embed_dim: 8,
            depths: vec![2, 2],
            head_dim: 4,
            mlp_ratio: 2,
            n_classes: 3,
            in_channels: 2,
            input: [8, 16],
        }
    }

    fn input(cfg: &ModelConfig, b: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![b, cfg.in_channels, cfg.input[0], cfg.input[1]], |i| {
            (i as f64 * 0.173).sin()
        })
    }

    #[test]
    fn paper_scale_latent_shapes() {
        let model = SwinFi::<f32>::new(ModelConfig::swinfi(32, &[2, 2, 6, 2], 4), 0).unwrap();
        let x = Tensor::from_fn(vec![1, 4, 256, 256], |i| ((i % 97) as f32 * 0.01).sin());
        let fi = model.encode(&x, &[7]).unwrap();
        assert_eq!(fi[0].grid, [4, 32]);
        assert_eq!(fi[0].feats.shape(), &[128, 32]);
        assert_eq!(fi[0].frame_id, 7);
        let raw = x.numel() as u64;
        assert_eq!(Ratio::new(raw, fi[0].numel() as u64), compression_ratio(model.config()));
        assert_eq!(model.encode(&x, &[7]).unwrap(), fi);

        let deep = SwinFi::<f32>::new(ModelConfig::swinfi(32, &[2, 2, 2, 2, 6, 2], 4), 0).unwrap();
        let fi = deep.encode(&x, &[0]).unwrap();
        assert_eq!(fi[0].grid, [1, 8]);
        assert_eq!(fi[0].numel(), 256);
        assert_eq!(compression_ratio(deep.config()), Ratio::from_integer(1024));
    }

    #[test]
    fn decode_mirrors_shape_and_checks_digest() {
        let cfg = tiny();
        let model = SwinFi::<f64>::new(cfg.clone(), 1).unwrap();
        let x = input(&cfg, 2);
        let fi = model.encode(&x, &[0, 1]).unwrap();
        let y = model.decode(&fi).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
        assert_eq!(model.reconstruct(&x).unwrap(), y);

        let mut other = cfg;
        other.n_classes = 4;
        let other = SwinFi::<f64>::new(other, 1).unwrap();
        assert!(matches!(
            other.decode(&fi),
            Err(ModelError::IncompatibleCheckpoint { .. })
        ));
        assert!(model.encode(&input(&tiny(), 1), &[0, 1]).is_err());
    }

    #[test]
    fn zero_projections_reduce_encoder_to_embed_and_merges() {
        let cfg = tiny();
        let mut model = SwinFi::<f64>::new(cfg.clone(), 2).unwrap();
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let name = model.params().name(id).to_string();
            if name.contains("attn.proj") || name.contains("mlp.fc2") {
                let shape = model.params().get(id).shape().to_vec();
                model.params_mut().set(id, Tensor::zeros(shape)).unwrap();
            }
        }
        let x = input(&cfg, 1);
        let fi = model.encode(&x, &[0]).unwrap();
        let mut g = Graph::inference();
        let xv = g.constant(x).unwrap();
        let h = patch_embed(&mut g, model.params(), &model.embed, xv, cfg.patch).unwrap();
        let h = patch_merge(&mut g, model.params(), &model.merges[0], h, cfg.stages()[0].grid).unwrap();
        assert_eq!(g.value(h).data(), fi[0].feats.data());
    }

    #[test]
    fn classifier_properties() {
        let mut model = SwinFi::<f64>::new(
            ModelConfig {
                n_classes: 21,
                ..tiny()
            },
            3,
        )
        .unwrap();
        let fi = model.encode(&input(model.config(), 1), &[0]).unwrap();
        let logits = model.classify(&fi).unwrap();
        assert_eq!(logits.shape(), &[1, 21]);

        let mut shuffled = fi[0].clone();
        let c = shuffled.channels;
        let n = shuffled.feats.shape()[0];
        let order: Vec<usize> = (0..n).rev().collect();
        let data = order
            .iter()
            .flat_map(|&r| fi[0].feats.data()[r * c..(r + 1) * c].to_vec())
            .collect();
        shuffled.feats = Tensor::new(vec![n, c], data).unwrap();
        let permuted = model.classify(&[shuffled]).unwrap();
        for (a, b) in logits.data().iter().zip(permuted.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        for id in model.head_ids() {
            let shape = model.params().get(id).shape().to_vec();
            model.params_mut().set(id, Tensor::zeros(shape)).unwrap();
        }
        let mut g = Graph::new();
        let z = g.constant(fi[0].feats.clone().reshape(vec![1, n, c]).unwrap()).unwrap();
        let logits = model.classify_graph(&mut g, z).unwrap();
        let ce = g.cross_entropy(logits, &[5]).unwrap();
        assert!((g.value(ce).data()[0] - 21f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = tiny();
        let mut model = SwinFi::<f64>::new(cfg.clone(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ids: Vec<_> = model.params().ids().collect();
        for &id in &ids {
            let shape = model.params().get(id).shape().to_vec();
            let mut t: Tensor<f64> = trunc_normal(shape, 0.3, &mut rng);
            if model.params().name(id).ends_with("gain") {
                t.data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
            model.params_mut().set(id, t).unwrap();
        }
        let x = input(&cfg, 1);
        let checked: Vec<_> = ids
            .into_iter()
            .filter(|&id| !model.params().name(id).contains("attn.k.bias"))
            .collect();
        let report = grad_check_params(
            |g, store| {
                let mut m = model.clone();
                *m.params_mut() = store.clone();
                let xv = g.constant(x.clone())?;
                let z = m.encode_graph(g, xv).map_err(tensor_err)?;
                let y = m.decode_graph(g, z).map_err(tensor_err)?;
                let rec = crate::model::nmse_loss(g, y, xv).map_err(tensor_err)?;
                let logits = m.classify_graph(g, z).map_err(tensor_err)?;
                let ce = g.cross_entropy(logits, &[1])?;
                g.add(rec, ce)
            },
            model.params(),
            &checked,
            1e-5,
        )
        .unwrap();
        for (name, err) in report {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    fn tensor_err(e: ModelError) -> crate::tensor::TensorError {
        match e {
            ModelError::Tensor(t) => t,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn cast_and_reload() {
        let model = SwinFi::<f32>::new(tiny(), 5).unwrap();
        let wide: SwinFi<f64> = model.cast();
        assert_eq!(wide.params().numel(), model.params().numel());
        let mut fresh = SwinFi::<f32>::new(tiny(), 6).unwrap();
        let named = model
            .params()
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect();
        fresh.load_params(named).unwrap();
        let x = input(&tiny(), 1).cast();
        assert_eq!(fresh.reconstruct(&x).unwrap(), model.reconstruct(&x).unwrap());
        assert!(fresh.load_params(vec![]).is_err());
    }
}
