use std::sync::Arc;

use rand::Rng;

use super::layers::{Linear, Norm, INIT_STD};
use super::window::{relative_index, shift_mask, window_partition, window_reverse};
use super::StageGeometry;
use crate::tensor::{trunc_normal, Graph, ParamId, ParamStore, Result, Var};
use crate::Scalar;

/// Parameters and static layout of one Swin block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    /// `[(2M_s−1)(2M_t−1), heads]` relative position bias.
    pub rel_table: ParamId,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub head_dim: usize,
    pub geo: StageGeometry,
    /// Zero for the unshifted block of a pair.
    pub shift: [usize; 2],
    rel_index: Arc<[usize]>,
}

impl BlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        head_dim: usize,
        mlp_ratio: usize,
        table_window: [usize; 2],
        geo: StageGeometry,
        shifted: bool,
        rng: &mut R,
    ) -> Self {
        let heads = dim / head_dim;
        let table_len = (2 * table_window[0] - 1) * (2 * table_window[1] - 1);
        let hidden = dim * mlp_ratio;
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), dim),
            q: Linear::new(store, &format!("{name}.attn.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), dim, dim, true, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim, true, rng),
            rel_table: store.add(
                format!("{name}.attn.rel_bias"),
                trunc_normal(vec![table_len, heads], INIT_STD, rng),
            ),
            norm2: Norm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, true, rng),
            heads,
            head_dim,
            geo,
            shift: if shifted { geo.shift } else { [0, 0] },
            rel_index: relative_index(geo.window, table_window, heads).into(),
        }
    }
}

/// Multi-head self-attention inside each window.
///
/// `x` is `[B·windows, M, C]`; `mask`, if given, is `[windows, 1, M, M]`.
pub fn w_msa<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &BlockParams,
    x: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (bw, m, c) = (shape[0], shape[1], shape[2]);
    let (h, hd) = (p.heads, p.head_dim);
    let q = p.q.forward(g, store, x)?;
    let q = g.reshape(q, &[bw, m, h, hd])?;
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let k = p.k.forward(g, store, x)?;
    let k = g.reshape(k, &[bw, m, h, hd])?;
    let kt = g.permute(k, &[0, 2, 3, 1])?;
    let v = p.v.forward(g, store, x)?;
    let v = g.reshape(v, &[bw, m, h, hd])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;

    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::one() / T::of(hd as f64).sqrt())?;
    let table = g.param(store, p.rel_table)?;
    let bias = g.gather(table, p.rel_index.clone(), &[h, m, m])?;
    let mut scores = g.add(scores, bias)?;
    if let Some(mask) = mask {
        let nw = g.shape(mask)[0];
        let s = g.reshape(scores, &[bw / nw, nw, h, m, m])?;
        let s = g.add(s, mask)?;
        scores = g.reshape(s, &[bw, h, m, m])?;
    }
    let attn = g.softmax(scores, 3)?;
    let out = g.matmul(attn, v)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[bw, m, c])?;
    p.proj.forward(g, store, out)
}

/// Pre-norm Swin block on `[B, N, C]` tokens laid out on `p.geo.grid`.
pub fn swin_block<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p: &BlockParams, x: Var) -> Result<Var> {
    let h = p.norm1.forward(g, store, x)?;
    let windows = window_partition(g, h, &p.geo, p.shift)?;
    let mask = match shift_mask::<T>(&p.geo, p.shift) {
        Some(m) => Some(g.constant(m)?),
        None => None,
    };
    let attn = w_msa(g, store, p, windows, mask)?;
    let attn = window_reverse(g, attn, &p.geo, p.shift)?;
    let x = g.add(x, attn)?;
    let h = p.norm2.forward(g, store, x)?;
    let h = p.fc1.forward(g, store, h)?;
    let h = g.gelu(h)?;
    let h = p.fc2.forward(g, store, h)?;
    g.add(x, h)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check_params, Tensor};

    fn geo(grid: [usize; 2], window: [usize; 2]) -> StageGeometry {
        StageGeometry {
            grid,
            window,
            shift: [window[0] / 2, window[1] / 2],
        }
    }

    /// Re-draw every parameter at unit scale so gradients are well above
    /// finite-difference noise.
    fn rescale(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            let mut t: Tensor<f64> = trunc_normal(shape, 0.5, &mut rng);
            if store.name(id).ends_with("gain") {
                t.data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
            store.set(id, t).unwrap();
        }
    }

    fn block(
        dim: usize,
        head_dim: usize,
        geo: StageGeometry,
        shifted: bool,
        store: &mut ParamStore<f64>,
    ) -> BlockParams {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        BlockParams::new(store, "b", dim, head_dim, 4, geo.window, geo, shifted, &mut rng)
    }

    fn run(store: &ParamStore<f64>, p: &BlockParams, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone()).unwrap();
        let y = swin_block(&mut g, store, p, xv).unwrap();
        g.take_value(y)
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let mut store = ParamStore::new();
        let p = block(8, 4, geo([4, 8], [2, 4]), true, &mut store);
        rescale(&mut store, 2);
        for id in [p.proj.weight, p.proj.bias.unwrap(), p.fc2.weight, p.fc2.bias.unwrap()] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let x = Tensor::from_fn(vec![2, 32, 8], |i| (i as f64 * 0.37).sin());
        assert_eq!(run(&store, &p, &x), x);
    }

    #[test]
    fn singleton_window_is_value_projection() {
        let mut store = ParamStore::new();
        let p = block(8, 4, geo([1, 4], [1, 1]), false, &mut store);
        rescale(&mut store, 3);
        let x = Tensor::from_fn(vec![4, 1, 8], |i| (i as f64 * 0.11).cos());
        let mut g = Graph::inference();
        let xv = g.constant(x).unwrap();
        let y = w_msa(&mut g, &store, &p, xv, None).unwrap();
        let v = p.v.forward(&mut g, &store, xv).unwrap();
        let expected = p.proj.forward(&mut g, &store, v).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(expected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reversing_tokens_and_bias_reverses_output() {
        let m = 6;
        let mut store = ParamStore::new();
        let p = block(8, 4, geo([1, m], [1, m]), false, &mut store);
        rescale(&mut store, 4);
        let x = Tensor::from_fn(vec![1, m, 8], |i| (i as f64 * 0.23).sin());
        let rev = |t: &Tensor<f64>| {
            let c = t.shape()[2];
            let mut out = Vec::with_capacity(t.numel());
            for r in (0..m).rev() {
                out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
            Tensor::new(t.shape().to_vec(), out).unwrap()
        };
        let attn = |store: &ParamStore<f64>, x: &Tensor<f64>| {
            let mut g = Graph::inference();
            let xv = g.constant(x.clone()).unwrap();
            let y = w_msa(&mut g, store, &p, xv, None).unwrap();
            g.take_value(y)
        };
        let y = attn(&store, &x);
        // Offset Δt maps to −Δt: flip the bias table along its offset axis.
        let mut flipped = store.clone();
        let table = store.get(p.rel_table);
        let heads = table.shape()[1];
        let rows = table.shape()[0];
        let data = (0..rows)
            .flat_map(|r| table.data()[(rows - 1 - r) * heads..(rows - r) * heads].to_vec())
            .collect();
        flipped
            .set(p.rel_table, Tensor::new(table.shape().to_vec(), data).unwrap())
            .unwrap();
        let y_rev = attn(&flipped, &rev(&x));
        for (a, b) in rev(&y).data().iter().zip(y_rev.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Without the flip the outputs differ, so the bias is order-aware.
        let unflipped = attn(&store, &rev(&x));
        assert!(rev(&y)
            .data()
            .iter()
            .zip(unflipped.data())
            .any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn shifted_block_matches_unshifted_on_interior_windows() {
        let (gt, wt, s) = (32, 8, 4);
        let g1 = geo([1, gt], [1, wt]);
        let mut store = ParamStore::new();
        let plain = block(8, 4, g1, false, &mut store);
        rescale(&mut store, 5);
        let mut shifted = plain.clone();
        shifted.shift = [0, s];
        let x = Tensor::from_fn(vec![1, gt, 8], |i| (i as f64 * 0.19).sin() + 0.1 * (i % 7) as f64);
        // x'[p] = x[p − s]: shifted windows of x' are the plain windows of x.
        let roll = |t: &Tensor<f64>| {
            let c = t.shape()[2];
            let mut out = vec![0.0; t.numel()];
            for p in 0..gt {
                let q = (p + s) % gt;
                out[q * c..(q + 1) * c].copy_from_slice(&t.data()[p * c..(p + 1) * c]);
            }
            Tensor::new(t.shape().to_vec(), out).unwrap()
        };
        let a = roll(&run(&store, &plain, &x));
        let b = run(&store, &shifted, &roll(&x));
        let c = 8;
        // Interior windows: tokens s..gt−wt+s of the rolled grid.
        for p in s..gt - wt + s {
            for ch in 0..c {
                let (u, v) = (a.data()[p * c + ch], b.data()[p * c + ch]);
                assert!((u - v).abs() < 1e-12, "token {p}");
            }
        }
        // The wrapped window is masked, so it differs from full attention.
        let last: Vec<_> = (gt - wt + s..gt).chain(0..s).collect();
        assert!(last
            .iter()
            .any(|&p| (0..c).any(|ch| (a.data()[p * c + ch] - b.data()[p * c + ch]).abs() > 1e-9)));
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let geo = geo([4, 8], [2, 4]);
        for shifted in [false, true] {
            let mut store = ParamStore::new();
            let p = block(8, 4, geo, shifted, &mut store);
            rescale(&mut store, 6);
            let x = Tensor::from_fn(vec![1, 32, 8], |i| (i as f64 * 0.41).sin());
            let r = Tensor::from_fn(vec![1, 32, 8], |i| (i as f64 * 1.7).cos());
            // A key bias shifts every score in a row equally, so softmax
            // removes it and its true gradient is zero.
            let k_bias = p.k.bias.unwrap();
            let ids: Vec<_> = store.ids().filter(|&id| id != k_bias).collect();
            let report = grad_check_params(
                |g, store| {
                    let xv = g.constant(x.clone())?;
                    let rv = g.constant(r.clone())?;
                    let y = swin_block(g, store, &p, xv)?;
                    let y = g.mul(y, rv)?;
                    g.sum(y)
                },
                &store,
                &ids,
                1e-5,
            )
            .unwrap();
            for (name, err) in report {
                assert!(err < 1e-4, "{name}: {err}");
            }
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let y = swin_block(&mut g, &store, &p, xv).unwrap();
            let loss = g.sum_sq(y).unwrap();
            g.backward(loss).unwrap();
            let kb = g.param_grad(k_bias).unwrap();
            assert!(kb.data().iter().all(|v| v.abs() < 1e-10), "{:?}", kb.data());
        }
    }
}
