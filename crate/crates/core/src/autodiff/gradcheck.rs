use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` receives a fresh tape and the variable bound to `x`, and must return a
/// scalar. The result is the largest per-coordinate
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    let analytic = tape.input_gradient(loss, xv)?;

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::new(x.shape().to_vec(), values)?);
        let out = f(&mut t, v)?;
        let value = t
            .value(out)
            .item()
            .ok_or_else(|| Error::NotScalar(t.value(out).shape().to_vec()))?;
        if !value.is_finite() {
            return Err(Error::NumericOverflow { op: "finite_diff_check" });
        }
        Ok(value)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_near_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.7, 2.2]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn linear_is_rounding_level() {
        let x = Tensor::from_vec(vec![0.5, 1.5]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let s = t.scale(v, 3.0)?;
                t.sum(s)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(finite_diff_check(|t, v| t.sum(v), &x, 0.0).is_err());
    }
}
