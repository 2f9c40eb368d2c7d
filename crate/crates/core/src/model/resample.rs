use std::sync::Arc;

use super::layers::Linear;
use super::window::{batched, invert, merge_index};
use super::{ModelError, Result};
use crate::tensor::{Graph, ParamStore, Var};
use crate::Scalar;

/// Flat source offset in `[B, D, S, T]` for every element of the
/// `[B, N, D·p_S·p_T]` patch-token layout.
fn patch_index(b: usize, d: usize, input: [usize; 2], patch: [usize; 2]) -> Vec<usize> {
    let [s, t] = input;
    let [ps, pt] = patch;
    let (gs, gt) = (s / ps, t / pt);
    let mut idx = Vec::with_capacity(b * d * s * t);
    for bi in 0..b {
        for i in 0..gs {
            for j in 0..gt {
                for di in 0..d {
                    for a in 0..ps {
                        for c in 0..pt {
                            idx.push(((bi * d + di) * s + i * ps + a) * t + j * pt + c);
                        }
                    }
                }
            }
        }
    }
    idx
}

fn check_patch(shape: &[usize], patch: [usize; 2]) -> Result<()> {
    if shape.len() != 4 || !shape[2].is_multiple_of(patch[0]) || !shape[3].is_multiple_of(patch[1]) {
        return Err(ModelError::Config(format!(
            "input {shape:?} is not tiled by {}×{} patches",
            patch[0], patch[1]
        )));
    }
    Ok(())
}

/// `[B, D, S, T]` to `[B, N, C]`: each `p_S×p_T×D` block, flattened in
/// `(d, s, t)` order, goes through `embed`. Tokens are subcarrier-major.
pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    embed: &Linear,
    x: Var,
    patch: [usize; 2],
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    check_patch(&shape, patch)?;
    let (b, d) = (shape[0], shape[1]);
    let n = (shape[2] / patch[0]) * (shape[3] / patch[1]);
    let f = d * patch[0] * patch[1];
    let idx: Arc<[usize]> = patch_index(b, d, [shape[2], shape[3]], patch).into();
    let tokens = g.gather(x, idx, &[b, n, f])?;
    Ok(embed.forward(g, store, tokens)?)
}

/// Inverse layout of [`patch_embed`]: project `[B, N, C]` tokens to
/// `D·p_S·p_T` features and reassemble `[B, D, S, T]`.
#[allow(clippy::too_many_arguments)]
pub fn unembed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &Linear,
    x: Var,
    channels: usize,
    input: [usize; 2],
    patch: [usize; 2],
) -> Result<Var> {
    let b = g.shape(x)[0];
    check_patch(&[b, channels, input[0], input[1]], patch)?;
    let feats = head.forward(g, store, x)?;
    let idx: Arc<[usize]> = invert(&patch_index(b, channels, input, patch)).into();
    Ok(g.gather(feats, idx, &[b, channels, input[0], input[1]])?)
}

/// Concatenate each 2×2 neighbourhood (4C) and project back to C.
pub fn patch_merge<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    reduce: &Linear,
    x: Var,
    grid: [usize; 2],
) -> Result<Var> {
    if !grid[0].is_multiple_of(2) || !grid[1].is_multiple_of(2) {
        return Err(ModelError::Config(format!("cannot merge odd grid {grid:?}")));
    }
    let shape = g.shape(x).to_vec();
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let idx = batched(&merge_index(grid), b);
    let cat = g.gather_rows(x, idx, &[b, n / 4, 4 * c])?;
    Ok(reduce.forward(g, store, cat)?)
}

/// Project each token to 4C and spread the four chunks over the 2×2
/// neighbourhood of the doubled grid. `grid` is the input grid.
pub fn patch_split<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    expand: &Linear,
    x: Var,
    grid: [usize; 2],
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let wide = expand.forward(g, store, x)?;
    let idx = batched(&invert(&merge_index([2 * grid[0], 2 * grid[1]])), b);
    let wide = g.reshape(wide, &[b, 4 * n, c])?;
    Ok(g.gather_rows(wide, idx, &[b, 4 * n, c])?)
}
