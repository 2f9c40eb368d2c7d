//! Token regrouping for windowed attention, patch merging and splitting.
//!
//! Tokens of one image sit on a `[g_s, g_t]` grid in row-major order
//! (subcarrier-major, then time). All maps here are row indices for
//! [`Graph::gather_rows`](crate::tensor::Graph::gather_rows).

use std::sync::Arc;

use super::StageGeometry;
use crate::tensor::{Graph, Result, Tensor, Var};
use crate::Scalar;

/// Additive mask value for token pairs that must not attend to each other.
pub const MASK_VALUE: f64 = -1e9;

/// For each row of the window-major layout, the source token on the grid.
///
/// The grid is first rolled by `-shift` (token `(i, j)` moves to
/// `(i - s_s, j - s_t)` modulo the grid) and then cut into windows; windows
/// are row-major, tokens inside a window are row-major.
pub fn partition_index(grid: [usize; 2], window: [usize; 2], shift: [usize; 2]) -> Vec<usize> {
    let [gs, gt] = grid;
    let [ws, wt] = window;
    let mut idx = Vec::with_capacity(gs * gt);
    for win_s in 0..gs / ws {
        for win_t in 0..gt / wt {
            for a in 0..ws {
                for b in 0..wt {
                    let s = (win_s * ws + a + shift[0]) % gs;
                    let t = (win_t * wt + b + shift[1]) % gt;
                    idx.push(s * gt + t);
                }
            }
        }
    }
    idx
}

/// Inverse of a permutation.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (r, &p) in perm.iter().enumerate() {
        inv[p] = r;
    }
    inv
}

/// Repeat a per-image row map over a batch.
pub fn batched(per_image: &[usize], batch: usize) -> Arc<[usize]> {
    let n = per_image.len();
    (0..batch)
        .flat_map(|b| per_image.iter().map(move |&i| b * n + i))
        .collect()
}

/// `[B, N, C]` tokens to `[B·windows, M, C]`.
pub fn window_partition<T: Scalar>(g: &mut Graph<T>, x: Var, geo: &StageGeometry, shift: [usize; 2]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, c) = (shape[0], shape[2]);
    let idx = batched(&partition_index(geo.grid, geo.window, shift), b);
    g.gather_rows(x, idx, &[b * geo.windows(), geo.window_tokens(), c])
}

/// `[B·windows, M, C]` back to `[B, N, C]`; exact inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(g: &mut Graph<T>, x: Var, geo: &StageGeometry, shift: [usize; 2]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n = geo.tokens();
    let b = shape[0] / geo.windows();
    let c = shape[2];
    let idx = batched(&invert(&partition_index(geo.grid, geo.window, shift)), b);
    g.gather_rows(x, idx, &[b, n, c])
}

/// Relative-position lookup: for head `h` and window tokens `(i, j)`, the
/// flat index into a `[(2M_s−1)(2M_t−1), heads]` bias table. `table_window`
/// is the configured window; `window` may be smaller after clamping.
pub fn relative_index(window: [usize; 2], table_window: [usize; 2], heads: usize) -> Vec<usize> {
    let m = window[0] * window[1];
    let span_t = 2 * table_window[1] - 1;
    let mut idx = Vec::with_capacity(heads * m * m);
    for h in 0..heads {
        for i in 0..m {
            let (si, ti) = (i / window[1], i % window[1]);
            for j in 0..m {
                let (sj, tj) = (j / window[1], j % window[1]);
                let ds = si + table_window[0] - 1 - sj;
                let dt = ti + table_window[1] - 1 - tj;
                idx.push((ds * span_t + dt) * heads + h);
            }
        }
    }
    idx
}

/// Additive attention mask `[windows, 1, M, M]` for a shifted stage: token
/// pairs that came from different regions before the roll get
/// [`MASK_VALUE`]. `None` when the shift is zero.
pub fn shift_mask<T: Scalar>(geo: &StageGeometry, shift: [usize; 2]) -> Option<Tensor<T>> {
    if shift == [0, 0] {
        return None;
    }
    let region = |p: usize, g: usize, w: usize, s: usize| -> usize {
        if s == 0 || p < g - w {
            0
        } else if p < g - s {
            1
        } else {
            2
        }
    };
    let [gs, gt] = geo.grid;
    let [ws, wt] = geo.window;
    let m = ws * wt;
    let nw = geo.windows();
    let mut data = Vec::with_capacity(nw * m * m);
    for win_s in 0..gs / ws {
        for win_t in 0..gt / wt {
            let ids: Vec<usize> = (0..m)
                .map(|i| {
                    let s = win_s * ws + i / wt;
                    let t = win_t * wt + i % wt;
                    region(s, gs, ws, shift[0]) * 3 + region(t, gt, wt, shift[1])
                })
                .collect();
            for i in 0..m {
                for j in 0..m {
                    data.push(if ids[i] == ids[j] { T::zero() } else { T::of(MASK_VALUE) });
                }
            }
        }
    }
    Some(Tensor::new(vec![nw, 1, m, m], data).expect("mask shape"))
}

/// Row map for patch merging: `[N, C]` to `[N/4, 4, C]`, each 2×2
/// neighbourhood ordered (0,0), (1,0), (0,1), (1,1).
pub fn merge_index(grid: [usize; 2]) -> Vec<usize> {
    let [gs, gt] = grid;
    let mut idx = Vec::with_capacity(gs * gt);
    for i in 0..gs / 2 {
        for j in 0..gt / 2 {
            for (a, b) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                idx.push((2 * i + a) * gt + 2 * j + b);
            }
        }
    }
    idx
}
