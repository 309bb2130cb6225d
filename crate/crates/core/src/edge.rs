//! Binary boundary maps derived from label maps.
//!
//! A pixel is an edge pixel when one of its in-bounds 4-neighbours carries a
//! different label. The ignore label counts as an ordinary distinct label here,
//! and nothing outside the image is considered, so the outer frame is only an
//! edge where the labels change. A thickness `t > 1` dilates the result with a
//! `(2t − 1) × (2t − 1)` square.

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{Element, Tensor};

/// `(n, 1, h, w)` mask with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl EdgeMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w || data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("edge map must hold n·h·w values in {0, 1}"));
        }
        Ok(Self { n, h, w, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, 1, self.h, self.w]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(self.dims(), data).expect("edge map dims are consistent")
    }

    pub fn flip_horizontal(&self) -> EdgeMap {
        let mut out = self.clone();
        for (dst, src) in out.data.chunks_mut(self.w).zip(self.data.chunks(self.w)) {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        out
    }
}

pub fn extract_edge_map(labels: &LabelMap, thickness: usize) -> Result<EdgeMap> {
    if thickness == 0 {
        return Err(Error::invalid("edge thickness must be at least 1"));
    }
    let (n, h, w) = (labels.n(), labels.h(), labels.w());
    let mut edges = vec![0u8; n * h * w];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let v = labels.get(i, y, x);
                let differs = (x + 1 < w && labels.get(i, y, x + 1) != v)
                    || (x > 0 && labels.get(i, y, x - 1) != v)
                    || (y + 1 < h && labels.get(i, y + 1, x) != v)
                    || (y > 0 && labels.get(i, y - 1, x) != v);
                edges[(i * h + y) * w + x] = differs as u8;
            }
        }
    }
    if thickness > 1 {
        edges = dilate(&edges, n, h, w, thickness - 1);
    }
    EdgeMap::new(n, h, w, edges)
}

/// Square dilation, separable into a row pass and a column pass.
fn dilate(src: &[u8], n: usize, h: usize, w: usize, r: usize) -> Vec<u8> {
    let mut rows = vec![0u8; src.len()];
    for (dst, s) in rows.chunks_mut(w).zip(src.chunks(w)) {
        for (x, d) in dst.iter_mut().enumerate() {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            *d = s[lo..=hi].iter().copied().max().unwrap_or(0);
        }
    }
    let mut out = vec![0u8; src.len()];
    for i in 0..n {
        for y in 0..h {
            let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
            for x in 0..w {
                out[(i * h + y) * w + x] = (lo..=hi).map(|yy| rows[(i * h + yy) * w + x]).max().unwrap_or(0);
            }
        }
    }
    out
}
