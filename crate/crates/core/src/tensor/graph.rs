use std::collections::HashMap;
use std::sync::Arc;

use super::{broadcast_offsets, broadcast_shape, numel, strides, ParamId, ParamStore, Result, Tensor, TensorError};
use crate::Scalar;

/// Square-root of 2/pi.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation of GELU.
pub const GELU_COEFF: f64 = 0.044_715;

/// Handle of a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the right (or left) operand of a binary op maps onto the output.
#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// Operand equals the trailing block of the output; index modulo its length.
    Suffix(usize),
    Map(Arc<[usize]>),
}

impl Bcast {
    fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return Bcast::Same;
        }
        let n = numel(input);
        let trailing = out.len() >= input.len() && out[out.len() - input.len()..] == *input;
        let trailing_ones = input.len() > out.len()
            && input[..input.len() - out.len()].iter().all(|&d| d == 1)
            && input[input.len() - out.len()..] == *out;
        if trailing || trailing_ones {
            Bcast::Suffix(n)
        } else {
            Bcast::Map(broadcast_offsets(out, input).into())
        }
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        ba: Bcast,
        bb: Bcast,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    GatherRows {
        x: Var,
        index: Arc<[usize]>,
        width: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: Var,
        tanh: Vec<T>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    SumSq {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamic computation graph recorded during a forward pass.
///
/// A training step builds a fresh graph, calls [`Graph::backward`] on a scalar
/// loss and reads parameter gradients back with [`Graph::param_grads`].
/// [`Graph::inference`] builds a graph that tracks no gradients.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            params: HashMap::new(),
        }
    }

    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.leaf(store.get(id).clone(), true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Drop everything recorded so far except `keep`, which becomes a constant.
    /// Only valid on inference graphs.
    pub fn retain(&mut self, keep: Var) -> Var {
        assert!(!self.recording, "retain is only available on inference graphs");
        let value = std::mem::replace(&mut self.nodes[keep.0].value, Tensor::scalar(T::zero()));
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(0)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    // ---- ops -------------------------------------------------------------

    /// Batched matrix product `[.., m, k] × [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let shape_err = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(shape_err());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shape(ba, bb).ok_or_else(shape_err)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if bb.is_empty() {
            let rows = av.len() / k;
            let mut out_shape = sa.clone();
            *out_shape.last_mut().unwrap() = n;
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                (av, k as isize, 1),
                (bv, n as isize, 1),
                T::zero(),
                (&mut out, n as isize, 1),
            );
            let value = Tensor::new(out_shape, out)?;
            return self.push(value, Op::MatMul { a, b }, "matmul", &[a, b]);
        }
        let oa = broadcast_offsets(&batch, ba);
        let ob = broadcast_offsets(&batch, bb);
        for (i, c) in out.chunks_mut(m * n).enumerate() {
            let a_mat = &av[oa[i] * m * k..(oa[i] + 1) * m * k];
            let b_mat = &bv[ob[i] * k * n..(ob[i] + 1) * k * n];
            T::gemm(
                m,
                k,
                n,
                T::one(),
                (a_mat, k as isize, 1),
                (b_mat, n as isize, 1),
                T::zero(),
                (c, n as isize, 1),
            );
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::MatMul { a, b }, "matmul", &[a, b])
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::Shape {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let ba = Bcast::new(&out_shape, &sa);
        let bb = Bcast::new(&out_shape, &sb);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<T> = match (&ba, &bb) {
            (Bcast::Same, Bcast::Same) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, Bcast::Suffix(n)) => {
                let mut out = av.to_vec();
                for row in out.chunks_exact_mut(*n) {
                    for (o, &y) in row.iter_mut().zip(bv) {
                        *o = f(*o, y);
                    }
                }
                out
            }
            _ => (0..numel(&out_shape)).map(|i| f(av[ba.at(i)], bv[bb.at(i)])).collect(),
        };
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Binary { kind, a, b, ba, bb }, name, &[a, b])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().map(|&v| v * factor).collect(),
        )?;
        self.push(value, Op::Scale { x, factor }, "scale", &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape { x }, "reshape", &[x])
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of {} axes", shape.len()),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let st = strides(&shape);
        let eff: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for_each_strided(&out_shape, &eff, |_, off| out.push(src[off]));
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Permute { x, perm: perm.to_vec() }, "permute", &[x])
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if index.len() != numel(shape) || index.iter().any(|&i| i >= src.len()) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: "index does not match output shape or source length".into(),
            });
        }
        let out = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        self.push(value, Op::Gather { x, index }, "gather", &[x])
    }

    /// Row gather over the last axis: `x` is viewed as `[rows, width]` with
    /// `width = shape(x).last()`, and output row `i` is source row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let width = *self.shape(x).last().unwrap();
        let src = self.value(x).data();
        let rows = src.len() / width;
        if index.len() * width != numel(shape) || index.iter().any(|&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "index does not match output shape or source rows".into(),
            });
        }
        let mut out = Vec::with_capacity(index.len() * width);
        for &r in index.iter() {
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        self.push(value, Op::GatherRows { x, index, width }, "gather_rows", &[x])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Softmax { x, axis }, "softmax", &[x])
    }

    /// Normalise each vector along the last axis, then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().unwrap();
        if self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let eps = T::of(eps);
        let wt = T::of(w as f64);
        let rows = src.len() / w;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * w..(r + 1) * w];
            let mean = row.iter().copied().sum::<T>() / wt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..w {
                let h = (row[j] - mean) * rs;
                xhat[r * w + j] = h;
                out[r * w + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::of(GELU_SQRT_2_OVER_PI);
        let k = T::of(GELU_COEFF);
        let half = T::of(0.5);
        let src = self.value(x).data();
        let tanh: Vec<T> = src.iter().map(|&v| fast_tanh(c * (v + k * v * v * v))).collect();
        let out = src
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| half * v * (T::one() + t))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(value, Op::Gelu { x, tanh }, "gelu", &[x])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let scale = T::one() / T::of(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Mean { x, axis }, "mean", &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum", &[x])
    }

    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSq { x }, "sum_sq", &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`;
    /// `logits` is `[batch, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let (b, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {k} classes"),
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[label];
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        loss /= T::of(b as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
            &[logits],
        )
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate gradients of the scalar `loss` into every leaf that
    /// requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, node, &g);
        }
        Ok(())
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    pub fn param_grad(&self, id: ParamId) -> Option<Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.grad(v))
    }

    /// Gradients for every parameter of `store`, `None` where unused.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        store.ids().map(|id| self.param_grad(id)).collect()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Visit every flat index of `shape` together with its offset under `eff`
/// strides.
fn for_each_strided(shape: &[usize], eff: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = shape.len();
    let total = numel(shape);
    let mut idx = vec![0usize; n];
    let mut cur = 0usize;
    for i in 0..total {
        f(i, cur);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            cur += eff[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            cur -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// `dst[b.at(i)] += sign · g[i]` with fast paths for the common layouts.
fn accumulate<T: Scalar>(dst: &mut [T], g: &[T], b: &Bcast, sign: T) {
    match b {
        Bcast::Same => {
            for (d, &gi) in dst.iter_mut().zip(g) {
                *d += sign * gi;
            }
        }
        Bcast::Suffix(n) => {
            for row in g.chunks_exact(*n) {
                for (d, &gi) in dst.iter_mut().zip(row) {
                    *d += sign * gi;
                }
            }
        }
        Bcast::Map(m) => {
            for (&i, &gi) in m.iter().zip(g) {
                dst[i] += sign * gi;
            }
        }
    }
}

/// `tanh` through a single `exp`.
#[inline]
fn fast_tanh<T: Scalar>(x: T) -> T {
    let e = (-(x.abs() + x.abs())).exp();
    let t = (T::one() - e) / (T::one() + e);
    if x < T::zero() {
        -t
    } else {
        t
    }
}

fn grad_slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = sb[sb.len() - 1];
            let av = val(*a);
            let bv = val(*b);
            let ba = &sa[..sa.len() - 2];
            let bb = &sb[..sb.len() - 2];
            if bb.is_empty() {
                let rows = av.len() / k;
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    // dA = dC · Bᵀ
                    T::gemm(
                        rows,
                        n,
                        k,
                        T::one(),
                        (g, n as isize, 1),
                        (bv, 1, n as isize),
                        T::one(),
                        (ga, k as isize, 1),
                    );
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    // dB = Aᵀ · dC
                    T::gemm(
                        k,
                        rows,
                        n,
                        T::one(),
                        (av, 1, k as isize),
                        (g, n as isize, 1),
                        T::one(),
                        (gb, n as isize, 1),
                    );
                }
                return;
            }
            let batch = broadcast_shape(ba, bb).expect("checked in forward");
            let oa = broadcast_offsets(&batch, ba);
            let ob = broadcast_offsets(&batch, bb);
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for (i, gc) in g.chunks(m * n).enumerate() {
                    let b_mat = &bv[ob[i] * k * n..(ob[i] + 1) * k * n];
                    let dst = &mut ga[oa[i] * m * k..(oa[i] + 1) * m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        (gc, n as isize, 1),
                        (b_mat, 1, n as isize),
                        T::one(),
                        (dst, k as isize, 1),
                    );
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                for (i, gc) in g.chunks(m * n).enumerate() {
                    let a_mat = &av[oa[i] * m * k..(oa[i] + 1) * m * k];
                    let dst = &mut gb[ob[i] * k * n..(ob[i] + 1) * k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        (a_mat, 1, k as isize),
                        (gc, n as isize, 1),
                        T::one(),
                        (dst, n as isize, 1),
                    );
                }
            }
        }
        Op::Binary { kind, a, b, ba, bb } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                match kind {
                    Binary::Add | Binary::Sub => accumulate(ga, g, ba, T::one()),
                    Binary::Mul => {
                        for (i, &gi) in g.iter().enumerate() {
                            ga[ba.at(i)] += gi * bv[bb.at(i)];
                        }
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                match kind {
                    Binary::Add => accumulate(gb, g, bb, T::one()),
                    Binary::Sub => accumulate(gb, g, bb, -T::one()),
                    Binary::Mul => {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[bb.at(i)] += gi * av[ba.at(i)];
                        }
                    }
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += gi * *factor;
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::Permute { x, perm } => {
            let shape = nodes[x.0].value.shape();
            let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
            let st = strides(shape);
            let eff: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for_each_strided(&out_shape, &eff, |i, off| gx[off] += g[i]);
            }
        }
        Op::Gather { x, index } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (&src, &gi) in index.iter().zip(g) {
                    gx[src] += gi;
                }
            }
        }
        Op::GatherRows { x, index, width } => {
            let w = *width;
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (r, &src) in index.iter().enumerate() {
                    for (d, &gi) in gx[src * w..(src + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *d += gi;
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gamma = val(*gain);
            let w = gamma.len();
            let rows = xhat.len() / w;
            if let Some(gg) = grad_slot(nodes, grads, *gain) {
                for r in 0..rows {
                    for j in 0..w {
                        gg[j] += g[r * w + j] * xhat[r * w + j];
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *bias) {
                for r in 0..rows {
                    for j in 0..w {
                        gb[j] += g[r * w + j];
                    }
                }
            }
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                let wt = T::of(w as f64);
                let mut dxhat = vec![T::zero(); w];
                for r in 0..rows {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..w {
                        let d = g[r * w + j] * gamma[j];
                        dxhat[j] = d;
                        mean_d += d;
                        mean_dx += d * xhat[r * w + j];
                    }
                    mean_d /= wt;
                    mean_dx /= wt;
                    for j in 0..w {
                        gx[r * w + j] += rstd[r] * (dxhat[j] - mean_d - xhat[r * w + j] * mean_dx);
                    }
                }
            }
        }
        Op::Gelu { x, tanh } => {
            let c = T::of(GELU_SQRT_2_OVER_PI);
            let k = T::of(GELU_COEFF);
            let half = T::of(0.5);
            let three = T::of(3.0);
            let xv = val(*x);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (((d, &gi), &v), &t) in gx.iter_mut().zip(g).zip(xv).zip(tanh) {
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                    *d += gi * (half * (T::one() + t) + half * v * dt);
                }
            }
        }
        Op::Mean { x, axis } => {
            let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
            let scale = T::one() / T::of(len as f64);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += gi * scale;
                        }
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumSq { x } => {
            let xv = val(*x);
            let two = T::of(2.0);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (d, &v) in gx.iter_mut().zip(xv) {
                    *d += two * v * g[0];
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let k = probs.len() / labels.len();
            let scale = g[0] / T::of(labels.len() as f64);
            if let Some(gl) = grad_slot(nodes, grads, *logits) {
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        gl[r * k + j] += (probs[r * k + j] - onehot) * scale;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_is_exact() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let x = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn matmul_grad_of_sum_is_b_transpose() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let b = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let y = g.matmul(a, b).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        // d sum(AB)/dA[i][l] = sum_j B[l][j]
        assert_eq!(g.grad(a).unwrap().data(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[2], &[1000.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data()[0], 1.0);
        assert!(g.value(y).data()[1] < 1e-300);
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1.0, 5.0, 1.0, 3.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_analytic_cases() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(Tensor::full(vec![2], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(vec![2])).unwrap();
        let x = g.constant(t(&[2], &[1.0, 3.0])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

        let gain = g.constant(Tensor::full(vec![3], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(vec![3])).unwrap();
        let x = g.constant(Tensor::full(vec![3], 7.5)).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(vec![2], 3.0e38f32)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { op: "scale" })));
        assert!(g.constant(Tensor::full(vec![1], f32::NAN)).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![3, 21])).unwrap();
        let l = g.cross_entropy(x, &[0, 5, 20]).unwrap();
        assert!((g.value(l).data()[0] - 21f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(x, &[0, 5, 21]).is_err());
    }

    #[test]
    fn broadcast_add_grad_reduces() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![4, 3])).unwrap();
        let b = g.input(Tensor::zeros(vec![3])).unwrap();
        let c = g.input(Tensor::zeros(vec![4, 1])).unwrap();
        let y = g.add(x, b).unwrap();
        let y = g.add(y, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[4.0; 3]);
        assert_eq!(g.grad(c).unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f64)).unwrap();
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        assert_eq!(g.value(y).get(&[3, 1, 2]), g.value(x).get(&[1, 2, 3]));
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z), g.value(x));
    }
}
