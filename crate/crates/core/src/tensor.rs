//! Dense rank-4 tensors in NCHW layout.
//!
//! Values are generic over the [`Element`] scalar so the same kernels run in
//! `f32` for training and in `f64` for gradient checking. Gradients are always
//! carried in `f64`.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::Prng;

/// Scalar type a [`Tensor`] can hold.
pub trait Element: Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a · b + beta · c` for row-major `a (m×k)`, `b (k×n)`, `c (m×n)`.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
}

impl Element for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: bounds asserted above; strides describe dense row-major buffers.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Element for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
        dgemm(m, k, n, a, false, b, false, beta, c);
    }
}

/// Double-precision GEMM with optional transposition of either operand.
/// `a` is stored as `m×k` (or `k×m` when `ta`), `b` as `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides match the stated storage order.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `(n, c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    fn checked_numel(&self) -> Result<usize> {
        let wide: u128 = self.0.iter().map(|&d| d as u128).product();
        // Cap at what a Vec<f64> gradient buffer can hold.
        if wide > (isize::MAX as u128) / 8 {
            return Err(Error::AllocationOverflow(wide));
        }
        Ok(wide as usize)
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c() + c) * self.h() + y) * self.w() + x
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape([n, c, h, w])
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape(d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
    pub requires_grad: bool,
    /// Accumulated gradient, filled after a backward pass.
    pub grad: Option<Vec<f64>>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel = shape.checked_numel()?;
        if data.len() != numel {
            return Err(Error::shape(format!("{} values supplied for shape {:?}", data.len(), shape.0)));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Result<Self> {
        let shape = shape.into();
        let numel = shape.checked_numel()?;
        Ok(Self { shape, data: vec![value; numel], requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    /// Normal samples scaled by `stddev`, drawn from [`Prng`] in buffer order.
    pub fn randn(shape: impl Into<Shape>, seed: u64, stddev: f64) -> Result<Self> {
        let mut rng = Prng::new(seed);
        Self::randn_with(shape, &mut rng, stddev)
    }

    pub fn randn_with(shape: impl Into<Shape>, rng: &mut Prng, stddev: f64) -> Result<Self> {
        let shape = shape.into();
        let numel = shape.checked_numel()?;
        let data = (0..numel).map(|_| T::from_f64(rng.normal() * stddev)).collect();
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Shape::SCALAR, data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> [usize; 4] {
        self.shape.0
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    /// Value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> Result<T> {
        if self.shape != Shape::SCALAR {
            return Err(Error::NonScalarLoss(self.shape.0));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors if any value is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what}: element {i} is {:?}", self.data[i]))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect(), requires_grad: false, grad: None }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.clone(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Batch item `i` as a `(1, c, h, w)` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape.0;
        if i >= n {
            return Err(Error::invalid(format!("batch index {i} out of range for n={n}")));
        }
        let per = c * h * w;
        Tensor::from_vec((1, c, h, w), self.data[i * per..(i + 1) * per].to_vec())
    }

    /// Concatenate along the batch axis.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.shape.0;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::shape(format!("cannot stack {:?} with {:?}", t.shape.0, first.shape.0)));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec((n, c, h, w), data)
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Self {
        let [n, c, h, w] = self.shape.0;
        let mut out = self.clone();
        out.grad = None;
        for p in 0..n * c * h {
            let row = &self.data[p * w..(p + 1) * w];
            for x in 0..w {
                out.data[p * w + x] = row[w - 1 - x];
            }
        }
        out
    }
}
