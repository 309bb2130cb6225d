//! Differentiable network building blocks recorded on a [`Tape`].

mod activation;
mod conv;
mod norm;
mod pool;
mod resize;
mod softmax;

pub use conv::conv_output_size;
pub use norm::{BnMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub(crate) use resize::{lerp, Tap};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

impl<T: Element> Tape<T> {
    /// Stack `a` then `b` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
            return Err(Error::shape(format!("concat_channels: {:?} vs {:?}", sa.0, sb.0)));
        }
        let (n, ca, cb, plane) = (sa.n(), sa.c(), sb.c(), sa.plane());
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..n {
                data.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
                data.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
            }
        }
        let out = Tensor::from_vec((n, ca + cb, sa.h(), sa.w()), data)?;
        Ok(self.record(out, &[a, b], move |args| {
            let split = |offset: usize, c: usize| {
                let mut g = Vec::with_capacity(n * c * plane);
                for i in 0..n {
                    let base = (i * (ca + cb) + offset) * plane;
                    g.extend_from_slice(&args.grad[base..base + c * plane]);
                }
                g
            };
            vec![args.needs[0].then(|| split(0, ca)), args.needs[1].then(|| split(ca, cb))]
        }))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.c() {
            return Err(Error::shape(format!("slice_channels {start}..{} of {} channels", start + len, s.c())));
        }
        let (n, c, plane) = (s.n(), s.c(), s.plane());
        let mut data = Vec::with_capacity(n * len * plane);
        {
            let d = self.value(x).data();
            for i in 0..n {
                let base = (i * c + start) * plane;
                data.extend_from_slice(&d[base..base + len * plane]);
            }
        }
        let out = Tensor::from_vec((n, len, s.h(), s.w()), data)?;
        Ok(self.record(out, &[x], move |args| {
            let mut g = vec![0.0; n * c * plane];
            for i in 0..n {
                let base = (i * c + start) * plane;
                g[base..base + len * plane].copy_from_slice(&args.grad[i * len * plane..(i + 1) * len * plane]);
            }
            vec![Some(g)]
        }))
    }
}
