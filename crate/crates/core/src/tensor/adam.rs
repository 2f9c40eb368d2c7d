use super::{ParamId, ParamStore, Result, Tensor, TensorError};
use crate::Scalar;

/// Moment buffers and hyper-parameters of Adam for a fixed set of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    ids: Vec<ParamId>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for `ids`, with the usual defaults `β = (0.9, 0.999)`,
    /// `ε = 1e-8`.
    pub fn new(store: &ParamStore<T>, ids: impl IntoIterator<Item = ParamId>, lr: f64) -> Self {
        let ids: Vec<ParamId> = ids.into_iter().collect();
        let zeros = |id: &ParamId| vec![T::zero(); store.get(*id).numel()];
        Self {
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }
}

/// One bias-corrected Adam update of the parameters tracked by `state`.
///
/// `grads` is indexed by [`ParamId`] over the whole store; parameters without
/// a gradient are skipped.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(TensorError::Invalid {
            op: "adam_step",
            msg: format!("{} gradients for {} parameters", grads.len(), params.len()),
        });
    }
    for &id in &state.ids {
        if let Some(g) = &grads[id.index()] {
            if g.shape() != params.get(id).shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let bc1 = T::of(1.0 - state.beta1.powi(t));
    let bc2 = T::of(1.0 - state.beta2.powi(t));
    let lr = T::of(state.lr);
    let eps = T::of(state.eps);
    for (slot, &id) in state.ids.iter().enumerate() {
        let Some(g) = &grads[id.index()] else {
            continue;
        };
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        let theta = params.get_mut(id).data_mut();
        for i in 0..theta.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store(0.0);
        let mut st = AdamState::new(&s, [id], 1e-3);
        adam_step(&mut s, &[Some(Tensor::scalar(0.5))], &mut st).unwrap();
        let theta = s.get(id).data()[0];
        assert!((theta + 1e-3).abs() < 1e-10, "{theta}");
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = store(1.25);
        let mut st = AdamState::new(&s, [id], 1e-2);
        for _ in 0..10 {
            adam_step(&mut s, &[Some(Tensor::scalar(0.0))], &mut st).unwrap();
        }
        assert_eq!(s.get(id).data()[0], 1.25);
        assert_eq!(st.step_count, 10);
    }

    #[test]
    fn quadratic_converges() {
        // f = (θ - 3)², ∇f = 2(θ - 3)
        let (mut s, id) = store(0.0);
        let mut st = AdamState::new(&s, [id], 0.1);
        for _ in 0..200 {
            let theta = s.get(id).data()[0];
            adam_step(&mut s, &[Some(Tensor::scalar(2.0 * (theta - 3.0)))], &mut st).unwrap();
        }
        let theta = s.get(id).data()[0];
        assert!((theta - 3.0).abs() < 0.05, "{theta}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut s, id) = store(0.0);
        let mut st = AdamState::new(&s, [id], 0.1);
        let bad = Some(Tensor::zeros(vec![2]));
        assert!(adam_step(&mut s, &[bad], &mut st).is_err());
        assert_eq!(st.step_count, 0);
    }
}
