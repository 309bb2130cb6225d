//! Bilinear resampling.
//!
//! The library-wide convention is `align_corners = true`: output index `i`
//! samples input coordinate `i · (in − 1) / (out − 1)`, so corner pixels map
//! onto corner pixels and a same-size resize is the exact identity.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Two neighbouring input indices and the weight of the second one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

impl Tap {
    /// Tap for a (possibly fractional) coordinate, clamped into `[0, len − 1]`.
    pub(crate) fn at(coord: f64, len: usize) -> Self {
        let last = (len - 1) as f64;
        let c = coord.clamp(0.0, last);
        let i0 = c.floor();
        let i0u = i0 as usize;
        Tap { i0: i0u, i1: (i0u + 1).min(len - 1), frac: c - i0 }
    }
}

/// Source taps for every output index along one axis.
pub(crate) fn axis_taps(input: usize, output: usize, align_corners: bool) -> Vec<Tap> {
    (0..output)
        .map(|o| {
            let src = if align_corners {
                if output > 1 {
                    o as f64 * ((input - 1) as f64 / (output - 1) as f64)
                } else {
                    0.0
                }
            } else {
                ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0)
            };
            Tap::at(src, input)
        })
        .collect()
}

/// `p + t·(q − p)`, exact at `t = 0` and for `p == q`, and never outside
/// `[min(p, q), max(p, q)]`.
#[inline]
pub(crate) fn lerp<T: Element>(p: T, q: T, t: T) -> T {
    if t == T::zero() {
        return p;
    }
    let v = p + t * (q - p);
    let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

impl<T: Element> Tape<T> {
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var> {
        let s = self.shape(x);
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid(format!("bilinear_resize to {out_h}x{out_w}")));
        }
        if s.h() == 0 || s.w() == 0 {
            return Err(Error::invalid("bilinear_resize of an empty image"));
        }
        let ty = axis_taps(s.h(), out_h, align_corners);
        let tx = axis_taps(s.w(), out_w, align_corners);
        let planes = s.n() * s.c();
        let (ih, iw) = (s.h(), s.w());
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        {
            let xd = self.value(x).data();
            for p in 0..planes {
                let img = &xd[p * ih * iw..(p + 1) * ih * iw];
                for y in &ty {
                    let fy = T::from_f64(y.frac);
                    let (r0, r1) = (&img[y.i0 * iw..], &img[y.i1 * iw..]);
                    for x in &tx {
                        let fx = T::from_f64(x.frac);
                        let top = lerp(r0[x.i0], r0[x.i1], fx);
                        let bot = lerp(r1[x.i0], r1[x.i1], fx);
                        out.push(lerp(top, bot, fy));
                    }
                }
            }
        }
        let out = Tensor::from_vec((s.n(), s.c(), out_h, out_w), out)?;
        Ok(self.record(out, &[x], move |args| {
            let mut g = vec![0.0; planes * ih * iw];
            for p in 0..planes {
                let gi = &mut g[p * ih * iw..(p + 1) * ih * iw];
                let go = &args.grad[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, y) in ty.iter().enumerate() {
                    for (ox, x) in tx.iter().enumerate() {
                        let v = go[oy * out_w + ox];
                        let (wy1, wx1) = (y.frac, x.frac);
                        let (wy0, wx0) = (1.0 - wy1, 1.0 - wx1);
                        gi[y.i0 * iw + x.i0] += v * wy0 * wx0;
                        gi[y.i0 * iw + x.i1] += v * wy0 * wx1;
                        gi[y.i1 * iw + x.i0] += v * wy1 * wx0;
                        gi[y.i1 * iw + x.i1] += v * wy1 * wx1;
                    }
                }
            }
            vec![Some(g)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_bit_exact() {
        let x0 = Tensor::<f32>::randn((2, 3, 5, 7), 1, 1.0).unwrap();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(x0.clone());
        let y = tape.bilinear_resize(x, 5, 7, true).unwrap();
        assert_eq!(tape.value(y).data(), x0.data());
    }

    #[test]
    fn constant_is_preserved_both_ways() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full((1, 2, 9, 13), 0.3).unwrap());
        let down = tape.bilinear_resize(x, 4, 5, true).unwrap();
        let up = tape.bilinear_resize(down, 9, 13, true).unwrap();
        let odd = tape.bilinear_resize(x, 17, 3, false).unwrap();
        for v in [down, up, odd] {
            assert!(tape.value(v).data().iter().all(|&t| t == 0.3));
        }
    }

    #[test]
    fn two_by_two_center() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec((1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = tape.bilinear_resize(x, 3, 3, true).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(0, 0, 1, 1), 1.5);
        assert_eq!(v.at(0, 0, 0, 0), 0.0);
        assert_eq!(v.at(0, 0, 2, 2), 3.0);
        assert_eq!(v.at(0, 0, 0, 1), 0.5);
    }

    #[test]
    fn zero_size_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros((1, 1, 2, 2)).unwrap());
        assert!(tape.bilinear_resize(x, 0, 3, true).is_err());
    }

    #[test]
    fn lerp_is_bounded() {
        let (p, q) = (0.1f32, 0.7f32);
        for i in 0..=1000 {
            let t = i as f32 / 1000.0;
            let v = lerp(p, q, t);
            assert!((p..=q).contains(&v));
        }
        assert_eq!(lerp(0.3f32, 0.3, 0.77), 0.3);
    }
}
