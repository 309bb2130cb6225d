use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Bin `i` of `bins` over `len` covers `[floor(i·len/bins), ceil((i+1)·len/bins))`.
fn bin_bounds(i: usize, bins: usize, len: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

impl<T: Element> Tape<T> {
    /// Average pooling onto a `bins × bins` grid. Neighbouring bins overlap by
    /// at most one row/column when the size is not a multiple of `bins`.
    pub fn adaptive_avg_pool(&mut self, x: Var, bins: usize) -> Result<Var> {
        let s = self.shape(x);
        if bins == 0 || bins > s.h() || bins > s.w() {
            return Err(Error::invalid(format!("adaptive_avg_pool: {bins} bins for a {}x{} input", s.h(), s.w())));
        }
        let (h, w) = (s.h(), s.w());
        let rows: Vec<_> = (0..bins).map(|i| bin_bounds(i, bins, h)).collect();
        let cols: Vec<_> = (0..bins).map(|i| bin_bounds(i, bins, w)).collect();
        let planes = s.n() * s.c();
        let mut out = Vec::with_capacity(planes * bins * bins);
        {
            let xd = self.value(x).data();
            for p in 0..planes {
                let img = &xd[p * h * w..(p + 1) * h * w];
                for &(y0, y1) in &rows {
                    for &(x0, x1) in &cols {
                        let mut acc = 0.0f64;
                        for y in y0..y1 {
                            acc += img[y * w + x0..y * w + x1].iter().map(|v| v.as_f64()).sum::<f64>();
                        }
                        out.push(T::from_f64(acc / ((y1 - y0) * (x1 - x0)) as f64));
                    }
                }
            }
        }
        let out = Tensor::from_vec((s.n(), s.c(), bins, bins), out)?;
        Ok(self.record(out, &[x], move |args| {
            let mut g = vec![0.0; planes * h * w];
            for p in 0..planes {
                for (by, &(y0, y1)) in rows.iter().enumerate() {
                    for (bx, &(x0, x1)) in cols.iter().enumerate() {
                        let v = args.grad[(p * bins + by) * bins + bx] / ((y1 - y0) * (x1 - x0)) as f64;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                g[p * h * w + y * w + xx] += v;
                            }
                        }
                    }
                }
            }
            vec![Some(g)]
        }))
    }
}
