//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate that attained `max_rel_error`.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps` for every coordinate.
pub fn central_difference<F>(mut f: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x)?;
        x[i] = orig - eps;
        let minus = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value at coordinate {i} ± {eps}: {plus} / {minus}"
            )));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// `max_i |a_i − n_i| / max(1, |a_i|)` and its argmax.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

/// Checks the tape gradient of a scalar-valued `f` at `point`.
///
/// `f` receives a fresh tape and the input variable and must return a
/// scalar variable; everything else it touches is treated as constant.
pub fn finite_difference_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true));
    let y = f(&mut tape, x)?;
    if !tape.value(y).is_finite() {
        return Err(Error::NonFinite("function value at the check point".into()));
    }
    tape.backward(y)?;
    let analytic = tape.grad(x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; point.numel()]);

    let shape = point.shape().to_vec();
    let numeric = central_difference(
        |vals| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(&shape, vals.to_vec())?);
            let y = f(&mut t, x)?;
            Ok(t.value(y).data()[0])
        },
        point.data(),
        eps,
    )?;
    let (max_rel_error, worst_index) = max_relative_error(&analytic, &numeric);
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let point = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let check = finite_difference_check(
            |tape, x| {
                let planes = tape.reshape(x, &[2, 1, 1])?;
                let sq = tape.mul_mask(planes, x)?;
                tape.sum(sq)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert_eq!(check.analytic, vec![2.0, 4.0]);
        assert!(check.max_rel_error < 1e-8, "{}", check.max_rel_error);
    }

    #[test]
    fn non_finite_function_is_reported() {
        let err = central_difference(|x| Ok(1.0 / (x[0] - x[0])), &[1.0], 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn relative_error_uses_unit_floor() {
        let (e, i) = max_relative_error(&[0.0, 100.0], &[1e-3, 100.05]);
        assert_eq!(i, 0);
        assert!((e - 1e-3).abs() < 1e-15);
    }
}
