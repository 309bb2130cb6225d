use crate::autodiff::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Logistic function in a form that never overflows `exp`.
pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Tape<T> {
    /// `max(0, x)`; the derivative at exactly zero is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.record(out, &[x], |args| {
            let xs = args.inputs[0].data();
            vec![Some(args.grad.iter().zip(xs).map(|(g, &v)| if v > T::zero() { *g } else { 0.0 }).collect())]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Tensor<T> = self.value(x).map(sigmoid_scalar);
        self.record(out, &[x], |args| {
            let ys = args.output.data();
            vec![Some(
                args.grad
                    .iter()
                    .zip(ys)
                    .map(|(g, &y)| {
                        let y = y.as_f64();
                        g * y * (1.0 - y)
                    })
                    .collect(),
            )]
        })
    }
}
