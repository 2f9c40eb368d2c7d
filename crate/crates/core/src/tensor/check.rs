use super::{Graph, ParamId, ParamStore, Result, Tensor, Var};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval_scalar(g: &Graph<f64>, out: Var) -> f64 {
    g.value(out).data()[0]
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe)?;
        probe[i] = x[i] - eps;
        let fm = f(&probe)?;
        probe[i] = x[i];
        grad.push((fp - fm) / (2.0 * eps));
    }
    Ok(grad)
}

/// Compare the tape gradient of the scalar graph `f` at `x` against central
/// differences and return the largest [`relative_error`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone())?;
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let shape = x.shape().to_vec();
    let numeric = central_difference(
        |p| {
            let mut g = Graph::inference();
            let xv = g.constant(Tensor::new(shape.clone(), p.to_vec())?)?;
            let out = f(&mut g, xv)?;
            Ok(eval_scalar(&g, out))
        },
        x.data(),
        eps,
    )?;
    Ok(analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// [`grad_check`] against every parameter in `ids`; returns the worst
/// relative error per parameter name.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, ids: &[ParamId], eps: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let mut report = Vec::with_capacity(ids.len());
    let mut probe_store = store.clone();
    for &id in ids {
        let base = store.get(id).clone();
        let analytic = g.param_grad(id).unwrap_or_else(|| Tensor::zeros(base.shape().to_vec()));
        let numeric = central_difference(
            |p| {
                probe_store.set(id, Tensor::new(base.shape().to_vec(), p.to_vec())?)?;
                let mut g = Graph::inference();
                let out = f(&mut g, &probe_store)?;
                Ok(eval_scalar(&g, out))
            },
            base.data(),
            eps,
        )?;
        probe_store.set(id, base)?;
        let worst = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        report.push((store.name(id).to_string(), worst));
    }
    Ok(report)
}
