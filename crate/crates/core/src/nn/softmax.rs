use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

impl<T: Element> Tape<T> {
    /// Per-pixel log-softmax across channels, max-shifted for stability.
    pub fn log_softmax_channel(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let (n, c, plane) = (s.n(), s.c(), s.plane());
        if c < 2 {
            return Err(Error::invalid(format!("log_softmax_channel over {c} channel(s)")));
        }
        let mut out = vec![T::zero(); s.numel()];
        {
            let xd = self.value(x).data();
            for i in 0..n {
                for p in 0..plane {
                    let at = |ch: usize| (i * c + ch) * plane + p;
                    let m = (0..c).map(|ch| xd[at(ch)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                    let lse = (0..c).map(|ch| (xd[at(ch)].as_f64() - m).exp()).sum::<f64>().ln();
                    for ch in 0..c {
                        out[at(ch)] = T::from_f64(xd[at(ch)].as_f64() - m - lse);
                    }
                }
            }
        }
        let out = Tensor::from_vec(s, out)?;
        Ok(self.record(out, &[x], move |args| {
            let y = args.output.data();
            let mut g = vec![0.0; y.len()];
            for i in 0..n {
                for p in 0..plane {
                    let at = |ch: usize| (i * c + ch) * plane + p;
                    let total: f64 = (0..c).map(|ch| args.grad[at(ch)]).sum();
                    for ch in 0..c {
                        g[at(ch)] = args.grad[at(ch)] - y[at(ch)].as_f64().exp() * total;
                    }
                }
            }
            vec![Some(g)]
        }))
    }
}
