//! 2-D convolution by im2col + GEMM.
//!
//! Accumulation order is fixed by the single-threaded GEMM, so results are
//! reproducible run to run.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{dgemm, Element, Tensor};

/// `floor((size + 2·padding − kernel) / stride) + 1`, or `None` if non-positive.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold one image (`c·h·w` values) into a `(c·kh·kw) × (oh·ow)` matrix.
    fn im2col<S: Copy, D: Copy>(&self, img: &[S], out: &mut [D], zero: D, conv: impl Fn(S) -> D) {
        let p = self.cols();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let dst = &mut out[row + oy * self.ow..row + (oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(zero);
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= self.w as isize { zero } else { conv(src[ix as usize]) };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-add columns back into an image gradient.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.cols();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                img[base + ix as usize] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tape<T> {
    /// Zero-padded cross-correlation. `weight` is `(out_c, in_c, kh, kw)`;
    /// `bias`, when given, holds `out_c` values in any 4-d layout.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x);
        let [oc, ic, kh, kw] = self.shape(weight).0;
        if ic != xs.c() {
            return Err(Error::shape(format!("conv2d: weight expects {ic} input channels, input has {}", xs.c())));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("conv2d: kernel {kh}x{kw} must be odd")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid(format!("conv2d: stride {stride} not in {{1, 2}}")));
        }
        if let Some(b) = bias {
            if self.value(b).len() != oc {
                return Err(Error::shape(format!(
                    "conv2d: bias has {} values for {oc} output channels",
                    self.value(b).len()
                )));
            }
        }
        let (oh, ow) =
            match (conv_output_size(xs.h(), kh, stride, padding), conv_output_size(xs.w(), kw, stride, padding)) {
                (Some(oh), Some(ow)) => (oh, ow),
                _ => {
                    return Err(Error::shape(format!(
                        "conv2d: {kh}x{kw} kernel does not fit {}x{} input with padding {padding}",
                        xs.h(),
                        xs.w()
                    )))
                }
            };
        let geo = Geometry { c: ic, h: xs.h(), w: xs.w(), kh, kw, oh, ow, stride, padding };
        let n = xs.n();
        let (k, p) = (geo.rows(), geo.cols());

        let mut out = vec![T::zero(); n * oc * p];
        {
            let xd = self.value(x).data();
            let wd = self.value(weight).data();
            let mut cols = vec![T::zero(); k * p];
            for i in 0..n {
                let img = &xd[i * ic * xs.plane()..(i + 1) * ic * xs.plane()];
                geo.im2col(img, &mut cols, T::zero(), |v| v);
                T::gemm(oc, k, p, wd, &cols, T::zero(), &mut out[i * oc * p..(i + 1) * oc * p]);
            }
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for (j, chunk) in out.chunks_mut(p).enumerate() {
                    let bv = bd[j % oc];
                    chunk.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
        let out = Tensor::from_vec((n, oc, oh, ow), out)?;

        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.record(out, &parents, move |args| {
            let xd = args.inputs[0].data();
            let wd: Vec<f64> = args.inputs[1].data().iter().map(|v| v.as_f64()).collect();
            let plane_in = geo.c * geo.h * geo.w;
            let mut gx = args.needs[0].then(|| vec![0.0; n * plane_in]);
            let mut gw = args.needs[1].then(|| vec![0.0; oc * k]);
            let mut cols = vec![0.0f64; k * p];
            let mut gcols = vec![0.0f64; k * p];
            for i in 0..n {
                let gout = &args.grad[i * oc * p..(i + 1) * oc * p];
                if let Some(gw) = gw.as_mut() {
                    geo.im2col(&xd[i * plane_in..(i + 1) * plane_in], &mut cols, 0.0, |v| v.as_f64());
                    // dW (oc×k) += gout (oc×p) · colsᵀ (p×k)
                    dgemm(oc, p, k, gout, false, &cols, true, 1.0, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    // dcols (k×p) = Wᵀ (k×oc) · gout (oc×p)
                    dgemm(k, oc, p, &wd, true, gout, false, 0.0, &mut gcols);
                    geo.col2im(&gcols, &mut gx[i * plane_in..(i + 1) * plane_in]);
                }
            }
            let mut grads = vec![gx, gw];
            if args.inputs.len() == 3 {
                grads.push(args.needs[2].then(|| {
                    let mut gb = vec![0.0; oc];
                    for (j, chunk) in args.grad.chunks(p).enumerate() {
                        gb[j % oc] += chunk.iter().sum::<f64>();
                    }
                    gb
                }));
            }
            grads
        }))
    }
}
