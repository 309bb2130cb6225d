use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Element>(&self) -> RunningStats<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        RunningStats { mean: conv(&self.mean), var: conv(&self.var) }
    }
}

impl<T: Element> Tape<T> {
    /// Batch normalization over `(n, h, w)` per channel.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch statistics into `stats` with weight `momentum` (the running
    /// variance uses the unbiased estimate). Eval mode is the fixed affine map
    /// given by `stats`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BnMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x);
        let (n, c, plane) = (s.n(), s.c(), s.plane());
        for (what, len) in
            [("gamma", self.value(gamma).len()), ("beta", self.value(beta).len()), ("running stats", stats.channels())]
        {
            if len != c {
                return Err(Error::shape(format!("batchnorm2d: {what} has {len} values for {c} channels")));
            }
        }
        let m = n * plane;
        let (mean, inv_std) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::invalid(format!(
                        "batchnorm2d: {m} value(s) per channel; train mode needs at least 2"
                    )));
                }
                let xd = self.value(x).data();
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        sum += xd[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = sum / m as f64;
                    let mut sq = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        sq += xd[base..base + plane].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m as f64;
                }
                for ch in 0..c {
                    let unbiased = var[ch] * m as f64 / (m - 1) as f64;
                    let rm = stats.mean[ch].as_f64();
                    let rv = stats.var[ch].as_f64();
                    stats.mean[ch] = T::from_f64((1.0 - momentum) * rm + momentum * mean[ch]);
                    stats.var[ch] = T::from_f64((1.0 - momentum) * rv + momentum * unbiased);
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            BnMode::Eval => (
                stats.mean.iter().map(|v| v.as_f64()).collect(),
                stats.var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect(),
            ),
        };

        let g: Vec<f64> = self.value(gamma).data().iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = self.value(beta).data().iter().map(|v| v.as_f64()).collect();
        let xd = self.value(x).data();
        let mut xhat = vec![0.0f64; xd.len()];
        let mut out = Vec::with_capacity(xd.len());
        for (j, chunk) in xd.chunks(plane).enumerate() {
            let ch = j % c;
            for (k, v) in chunk.iter().enumerate() {
                let h = (v.as_f64() - mean[ch]) * inv_std[ch];
                xhat[j * plane + k] = h;
                out.push(T::from_f64(g[ch] * h + b[ch]));
            }
        }
        let out = Tensor::from_vec(s, out)?;

        Ok(self.record(out, &[x, gamma, beta], move |args| {
            let gamma: Vec<f64> = args.inputs[1].data().iter().map(|v| v.as_f64()).collect();
            let mut sum_g = vec![0.0f64; c];
            let mut sum_gx = vec![0.0f64; c];
            for (j, chunk) in args.grad.chunks(plane).enumerate() {
                let ch = j % c;
                for (k, gv) in chunk.iter().enumerate() {
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * xhat[j * plane + k];
                }
            }
            let gx = args.needs[0].then(|| {
                let mut gx = vec![0.0; args.grad.len()];
                for (j, chunk) in args.grad.chunks(plane).enumerate() {
                    let ch = j % c;
                    let k0 = gamma[ch] * inv_std[ch];
                    for (k, gv) in chunk.iter().enumerate() {
                        let idx = j * plane + k;
                        gx[idx] = match mode {
                            BnMode::Train => k0 / m as f64 * (m as f64 * gv - sum_g[ch] - xhat[idx] * sum_gx[ch]),
                            BnMode::Eval => k0 * gv,
                        };
                    }
                }
                gx
            });
            vec![gx, args.needs[1].then(|| sum_gx.clone()), args.needs[2].then(|| sum_g.clone())]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(tape: &mut Tape<f64>, c: usize, gamma: f64, beta: f64) -> (Var, Var) {
        let g = tape.param(Tensor::full((1, c, 1, 1), gamma).unwrap());
        let b = tape.param(Tensor::full((1, c, 1, 1), beta).unwrap());
        (g, b)
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full((2, 1, 3, 3), 4.2).unwrap());
        let (g, b) = affine(&mut tape, 1, 1.0, 0.0);
        let mut st = RunningStats::new(1);
        let y = tape.batchnorm2d(x, g, b, &mut st, BnMode::Train, BN_MOMENTUM, BN_EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn((2, 3, 4, 4), 1, 2.0).unwrap());
        let (g, b) = affine(&mut tape, 3, 0.0, 0.7);
        let mut st = RunningStats::new(3);
        let y = tape.batchnorm2d(x, g, b, &mut st, BnMode::Train, BN_MOMENTUM, BN_EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn train_output_moments() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::randn((2, 4, 8, 8), 3, 3.0).unwrap().map(|v| v + 1.5));
        let g = tape.param(Tensor::ones((1, 4, 1, 1)).unwrap());
        let b = tape.param(Tensor::zeros((1, 4, 1, 1)).unwrap());
        let mut st = RunningStats::new(4);
        let y = tape.batchnorm2d(x, g, b, &mut st, BnMode::Train, BN_MOMENTUM, BN_EPS).unwrap();
        let yv = tape.value(y);
        for c in 0..4 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..64).map(move |p| (n, p)))
                .map(|(n, p)| yv.at(n, c, p / 8, p % 8) as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            // eps=1e-5 against variance ~9 shifts the result by ~1e-6
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn running_stats_update() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec((1, 1, 1, 2), vec![1.0, 3.0]).unwrap());
        let (g, b) = affine(&mut tape, 1, 1.0, 0.0);
        let mut st = RunningStats::new(1);
        tape.batchnorm2d(x, g, b, &mut st, BnMode::Train, 0.1, BN_EPS).unwrap();
        assert!((st.mean[0] - 0.2).abs() < 1e-12);
        // unbiased var of {1,3} is 2
        assert!((st.var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn single_element_train_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros((1, 2, 1, 1)).unwrap());
        let (g, b) = affine(&mut tape, 2, 1.0, 0.0);
        let mut st = RunningStats::new(2);
        assert!(tape.batchnorm2d(x, g, b, &mut st, BnMode::Train, 0.1, BN_EPS).is_err());
        assert!(tape.batchnorm2d(x, g, b, &mut st, BnMode::Eval, 0.1, BN_EPS).is_ok());
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let xs = Tensor::<f32>::randn((2, 3, 4, 4), 8, 1.0).unwrap();
        let mut st = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 2.0, 1.5] };
        let run = |st: &mut RunningStats| {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(xs.clone());
            let g = tape.param(Tensor::full((1, 3, 1, 1), 1.3).unwrap());
            let b = tape.param(Tensor::full((1, 3, 1, 1), -0.4).unwrap());
            let y = tape.batchnorm2d(x, g, b, st, BnMode::Eval, 0.1, BN_EPS).unwrap();
            tape.value(y).clone()
        };
        let a = run(&mut st);
        let b = run(&mut st);
        assert_eq!(a, b);
        assert_eq!(st.mean, vec![0.1, -0.2, 0.3]);
    }
}
