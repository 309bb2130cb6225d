//! Central-difference verification of backward rules.
//!
//! The numeric side never touches a backward rule: it only re-runs the
//! forward function on perturbed copies of the input. Run it on `Tape<f64>`
//! so that forward rounding does not swamp the difference quotient.

pub mod suite;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

const DENOM_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Check `∂f/∂x` at every coordinate of `x`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, epsilon: f64) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, epsilon, &coords)
}

/// Check `∂f/∂x` at the listed flat coordinates only.
pub fn finite_diff_check_at<T, F>(f: F, x: &Tensor<T>, epsilon: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::invalid(format!("finite_diff_check epsilon {epsilon}")));
    }
    if let Some(&bad) = coords.iter().find(|&&i| i >= x.len()) {
        return Err(Error::invalid(format!("coordinate {bad} out of range for {} values", x.len())));
    }

    let mut tape = Tape::<T>::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    if tape.shape(out) != Shape::SCALAR {
        return Err(Error::NonScalarLoss(tape.shape(out).0));
    }
    let analytic = tape.backward(out)?.get_or_zeros(xv);

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::<T>::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item()?.as_f64())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: coords.len(),
    };
    for &i in coords {
        let base = x.data()[i];
        let hi = base + T::from_f64(epsilon);
        let lo = base - T::from_f64(epsilon);
        let mut plus = x.clone();
        plus.data_mut()[i] = hi;
        let mut minus = x.clone();
        minus.data_mut()[i] = lo;
        let numeric = (eval(plus)? - eval(minus)?) / (hi.as_f64() - lo.as_f64());
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || !err.is_finite() {
            report = GradCheckReport {
                max_rel_error: if err.is_finite() { err } else { f64::INFINITY },
                worst_index: i,
                analytic: analytic[i],
                numeric,
                coords_checked: coords.len(),
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_zero_error() {
        // Dyadic inputs and step keep every sum exact.
        let x = Tensor::<f64>::from_vec((1, 1, 2, 3), vec![1.0, -2.0, 3.5, 0.25, 4.0, -1.5]).unwrap();
        let eps = 2f64.powi(-10);
        let r = finite_diff_check(|t, x| Ok(t.sum(x)), &x, eps).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.coords_checked, 6);
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::randn((1, 2, 3, 3), 1, 1.0).unwrap();
        let r = finite_diff_check(
            |t, x| {
                let sq = t.mul_elem(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }

    #[test]
    fn sum_of_squares_in_f32_is_close() {
        let x = Tensor::<f32>::randn((1, 1, 2, 2), 1, 1.0).unwrap();
        let r = finite_diff_check(
            |t, x| {
                let sq = t.mul_elem(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-2, "{r:?}");
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let x = Tensor::<f64>::zeros((1, 1, 2, 2)).unwrap();
        let err = finite_diff_check(|_, x| Ok(x), &x, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }

    #[test]
    fn detects_a_wrong_rule() {
        // Backward deliberately reports 3x instead of 2x.
        let x = Tensor::<f64>::randn((1, 1, 1, 4), 2, 1.0).unwrap();
        let r = finite_diff_check(
            |t, x| {
                let v = t.value(x).map(|a| a * a);
                let y = t.record(v, &[x], |args| {
                    let xs = args.inputs[0].data();
                    vec![Some(args.grad.iter().zip(xs).map(|(g, a)| g * 3.0 * a).collect())]
                });
                Ok(t.sum(y))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.3);
    }
}
