use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// Returns the largest per-coordinate `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
/// Coordinates listed in `exclude` are skipped; use it for points sitting on a
/// kink (e.g. a relu input at exactly 0) where the derivative is not defined.
pub fn check_gradients<F>(f: F, point: &Tensor, eps: f64, exclude: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("check_gradients", "eps must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.shape().to_vec(), point.data().to_vec())?;
    let y = f(&mut tape, x)?;
    let fx = tape.scalar(y);
    if !fx.is_finite() {
        return Err(Error::NonFinite(format!("f(point) = {fx}")));
    }
    let grads = tape.backward(y)?;
    let zeros = vec![0.0; point.len()];
    let analytic = grads.get(x).unwrap_or(&zeros).to_vec();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(point.shape().to_vec(), data)?;
        let y = f(&mut t, x)?;
        Ok(t.scalar(y))
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        if exclude.contains(&i) {
            continue;
        }
        let mut plus = point.data().to_vec();
        plus[i] += eps;
        let mut minus = point.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_near_exact() {
        let p = Tensor::from_vec(vec![1.0, 2.0]);
        let err = check_gradients(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &p,
            1e-5,
            &[],
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_is_machine_precision() {
        let p = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let err = check_gradients(
            |t, x| {
                let w = t.vector(vec![2.0, -3.0, 0.5]);
                let y = t.mul(x, w)?;
                Ok(t.sum(y))
            },
            &p,
            1e-5,
            &[],
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relu_kink_needs_exclusion() {
        let p = Tensor::from_vec(vec![0.0, 1.0]);
        let f = |t: &mut Tape, x: Var| {
            let r = t.relu(x);
            Ok(t.sum(r))
        };
        // Central difference at the kink sees slope 0.5; the subgradient is 0.
        let err = check_gradients(f, &p, 1e-5, &[]).unwrap();
        assert!(err > 0.5);
        let err = check_gradients(f, &p, 1e-5, &[0]).unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn non_finite_point_is_rejected() {
        let p = Tensor::from_vec(vec![-1.0]);
        let err = check_gradients(
            |t, x| {
                let l = t.log(x);
                Ok(t.sum(l))
            },
            &p,
            1e-5,
            &[],
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
