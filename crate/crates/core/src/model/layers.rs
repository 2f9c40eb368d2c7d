use rand::Rng;

use crate::tensor::{trunc_normal, Graph, ParamId, ParamStore, Result, Tensor, Var};
use crate::Scalar;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Affine map over the last axis; `weight` is `[in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            trunc_normal(vec![fan_in, fan_out], INIT_STD, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// LayerNorm over the last axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![dim], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}
