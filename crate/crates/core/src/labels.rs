use crate::error::{Error, Result};

/// Default reserved label excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Per-pixel class ids, `(n, h, w)` row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape(format!("label map {n}x{h}x{w} needs {} values, got {}", n * h * w, data.len())));
        }
        Ok(Self { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        Self { n, h, w, data: vec![value; n * h * w] }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }

    pub fn item(&self, i: usize) -> Result<LabelMap> {
        if i >= self.n {
            return Err(Error::invalid(format!("label batch index {i} out of range")));
        }
        let per = self.h * self.w;
        LabelMap::new(1, self.h, self.w, self.data[i * per..(i + 1) * per].to_vec())
    }

    pub fn stack(items: &[LabelMap]) -> Result<LabelMap> {
        let first = items.first().ok_or_else(|| Error::invalid("cannot stack zero label maps"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for m in items {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::shape("label maps differ in size"));
            }
            n += m.n;
            data.extend_from_slice(&m.data);
        }
        LabelMap::new(n, first.h, first.w, data)
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut out = self.clone();
        for (dst, src) in out.data.chunks_mut(self.w).zip(self.data.chunks(self.w)) {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        out
    }

    /// Errors on the first label that is neither `< num_classes` nor `ignore`.
    pub fn validate(&self, num_classes: usize, ignore: u8) -> Result<()> {
        match self.data.iter().find(|&&v| v != ignore && v as usize >= num_classes) {
            None => Ok(()),
            Some(v) => {
                Err(Error::invalid(format!("label {v} out of range for {num_classes} classes (ignore = {ignore})")))
            }
        }
    }

    /// Spatial dims must equal `(n, h, w)` of a tensor shape.
    pub(crate) fn check_matches(&self, dims: [usize; 4], what: &str) -> Result<()> {
        if (self.n, self.h, self.w) != (dims[0], dims[2], dims[3]) {
            return Err(Error::shape(format!("{what}: labels {}x{}x{} vs tensor {:?}", self.n, self.h, self.w, dims)));
        }
        Ok(())
    }
}
