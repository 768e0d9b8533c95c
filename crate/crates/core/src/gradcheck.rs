//! Central finite differences, used as an independent oracle for the analytic
//! gradients produced by the reverse pass.

use crate::autodiff::Parameterized;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(loss(p + ε) − loss(p − ε)) / 2ε` for every coordinate of every parameter
/// (frozen ones included), in [`Parameterized::parameters`] order.
///
/// Each coordinate is restored bit-exactly after probing.
pub fn finite_diff_grad<S, F>(state: &mut S, eps: f64, mut loss_fn: F) -> Result<Vec<Tensor>>
where
    S: Parameterized + ?Sized,
    F: FnMut(&S) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("ε must lie in [1e-7, 1e-3], got {eps}")));
    }
    let shapes: Vec<Vec<usize>> = state
        .parameters()
        .iter()
        .map(|p| p.value().shape().to_vec())
        .collect();
    let mut grads = Vec::with_capacity(shapes.len());
    for (pi, shape) in shapes.into_iter().enumerate() {
        let mut grad = Tensor::zeros(&shape);
        for c in 0..grad.len() {
            let original = state.parameters()[pi].value().data()[c];
            state.parameters_mut()[pi].value_mut().data_mut()[c] = original + eps;
            let plus = loss_fn(state)?;
            state.parameters_mut()[pi].value_mut().data_mut()[c] = original - eps;
            let minus = loss_fn(state)?;
            state.parameters_mut()[pi].value_mut().data_mut()[c] = original;
            grad.data_mut()[c] = (plus - minus) / (2.0 * eps);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Largest `|a − n| / max(|a|, |n|, 1e-6)` over all coordinates.
///
/// The floor keeps gradients that are numerically zero from dominating through
/// round-off in the difference quotient.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "parameter lists differ in length");
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.shape(), n.shape());
            a.data().iter().zip(n.data()).map(|(&a, &n)| {
                let denom = a.abs().max(n.abs()).max(1e-6);
                (a - n).abs() / denom
            })
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Parameter;

    struct Scalar(Parameter);

    impl Parameterized for Scalar {
        fn parameters(&self) -> Vec<&Parameter> {
            vec![&self.0]
        }
        fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
            vec![&mut self.0]
        }
    }

    fn scalar(v: f64) -> Scalar {
        Scalar(Parameter::new(Tensor::vector(vec![v]).unwrap()))
    }

    #[test]
    fn quadratic() {
        let mut s = scalar(3.0);
        let g = finite_diff_grad(&mut s, 1e-5, |s| {
            let w = s.0.value().data()[0];
            Ok(w * w)
        })
        .unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
        assert_eq!(s.0.value().data(), &[3.0]);
    }

    #[test]
    fn constant() {
        let mut s = scalar(-1.25);
        let g = finite_diff_grad(&mut s, 1e-4, |_| Ok(42.0)).unwrap();
        assert_eq!(g[0].data(), &[0.0]);
    }

    #[test]
    fn epsilon_range_enforced() {
        let mut s = scalar(0.0);
        assert!(finite_diff_grad(&mut s, 1e-2, |_| Ok(0.0)).is_err());
        assert!(finite_diff_grad(&mut s, 1e-9, |_| Ok(0.0)).is_err());
    }
}
