use super::{ModelError, Result};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::Scalar;

/// Serialized form of an NMSE of −∞ dB (perfect reconstruction).
pub const NMSE_DB_NEG_INF: &str = "-inf";

/// `Σ‖x̂ − x‖² / Σ‖x‖²` on the graph, for training.
pub fn nmse_loss<T: Scalar>(g: &mut Graph<T>, x_hat: Var, x: Var) -> Result<Var> {
    if g.shape(x_hat) != g.shape(x) {
        return Err(TensorError::Shape {
            op: "nmse_loss",
            lhs: g.shape(x_hat).to_vec(),
            rhs: g.shape(x).to_vec(),
        }
        .into());
    }
    let energy: f64 = g.value(x).data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
    if energy <= 0.0 {
        return Err(ModelError::DegenerateMetric);
    }
    let diff = g.sub(x_hat, x)?;
    let err = g.sum_sq(diff)?;
    Ok(g.scale(err, T::of(1.0 / energy))?)
}

/// Linear NMSE ratio, accumulated in f64.
pub fn nmse_ratio<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(TensorError::Shape {
            op: "nmse_ratio",
            lhs: x.shape().to_vec(),
            rhs: x_hat.shape().to_vec(),
        }
        .into());
    }
    let (mut err, mut energy) = (0.0, 0.0);
    for (&a, &b) in x.data().iter().zip(x_hat.data()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        err += (b - a) * (b - a);
        energy += a * a;
    }
    if energy <= 0.0 {
        return Err(ModelError::DegenerateMetric);
    }
    Ok(err / energy)
}

/// `10·log10(ratio)`; a zero ratio gives `-inf`.
pub fn nmse_db(ratio: f64) -> f64 {
    if ratio == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * ratio.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let x = Tensor::<f64>::from_fn(vec![2, 5], |i| i as f64 - 3.0);
        assert_eq!(nmse_db(nmse_ratio(&x, &x).unwrap()), f64::NEG_INFINITY);
        assert_eq!(nmse_db(nmse_ratio(&x, &Tensor::zeros(vec![2, 5])).unwrap()), 0.0);
        // Error energy 1% of the signal.
        let scaled = Tensor::new(vec![2, 5], x.data().iter().map(|v| v * 1.1).collect()).unwrap();
        assert!((nmse_db(nmse_ratio(&x, &scaled).unwrap()) + 20.0).abs() < 1e-9);
        assert!(matches!(
            nmse_ratio(&Tensor::<f64>::zeros(vec![3]), &Tensor::zeros(vec![3])),
            Err(ModelError::DegenerateMetric)
        ));
    }

    #[test]
    fn graph_loss_matches_ratio_and_gradient() {
        let x = Tensor::<f64>::from_fn(vec![3, 4], |i| (i as f64 * 0.7).sin() + 0.1);
        let y = Tensor::<f64>::from_fn(vec![3, 4], |i| (i as f64 * 0.3).cos());
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let yv = g.input(y.clone()).unwrap();
        let loss = nmse_loss(&mut g, yv, xv).unwrap();
        let expected = nmse_ratio(&x, &y).unwrap();
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
        let err = crate::tensor::grad_check(
            |g, v| {
                let xv = g.constant(x.clone())?;
                nmse_loss(g, v, xv).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("{other}"),
                })
            },
            &y,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let zero = g.constant(Tensor::zeros(vec![3, 4])).unwrap();
        assert!(matches!(nmse_loss(&mut g, yv, zero), Err(ModelError::DegenerateMetric)));
    }
}
