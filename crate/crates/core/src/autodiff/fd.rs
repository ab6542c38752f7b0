use super::{Graph, Role, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Compares the tape gradient of a scalar function against central
/// differences.
///
/// `build` records the function on a fresh graph given the input leaf and
/// returns the scalar output. The result is
/// `max_k |analytic_k - numeric_k| / max(1, |analytic_k|)`.
pub fn finite_difference_check<F>(build: F, point: &Tensor, epsilon: Float) -> Result<Float>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let evaluate = |at: &Tensor| -> Result<Float> {
        let mut g = Graph::new();
        let x = g.leaf(at.clone(), Role::Theta)?;
        let y = build(&mut g, x)?;
        let value = g.value(y).item();
        if !value.is_finite() {
            return Err(Error::Numeric("finite-difference probe evaluated to a non-finite value".into()));
        }
        Ok(value)
    };

    let mut g = Graph::new();
    let x = g.leaf(point.clone(), Role::Theta)?;
    let y = build(&mut g, x)?;
    let grads = g.gradients(y)?;
    let analytic = grads.of(x);

    let mut worst: Float = 0.0;
    let mut probe = point.clone();
    for k in 0..point.numel() {
        let original = probe.data()[k];
        probe.data_mut()[k] = original + epsilon;
        let plus = evaluate(&probe)?;
        probe.data_mut()[k] = original - epsilon;
        let minus = evaluate(&probe)?;
        probe.data_mut()[k] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[k];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_two() {
        let err = finite_difference_check(|g, x| g.square(x), &Tensor::scalar(2.0), 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_difference_check(
            |g, _x| {
                let c = g.constant(Tensor::scalar(4.0))?;
                g.sum(c)
            },
            &Tensor::from_vec(vec![1.0, -2.0]),
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        assert!(finite_difference_check(|g, x| g.square(x), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
