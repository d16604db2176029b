use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use super::KernelError;

/// Floating-point element type accepted by the kernel.
///
/// Training runs in `f32`; gradient checks run in `f64`.
pub trait Real: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c += a * b` for strided `[m, k]` by `[k, n]` views.
    fn gemm_acc(m: usize, k: usize, n: usize, a: Strided<'_, Self>, b: Strided<'_, Self>, c: &mut [Self], ldc: usize);
}

/// Read-only matrix view with row and column strides in elements.
#[derive(Clone, Copy, Debug)]
pub struct Strided<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<T> Strided<'_, T> {
    fn covers(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.row_stride + (cols - 1) * self.col_stride < self.data.len()
    }
}

macro_rules! gemm_impl {
    ($name:ident) => {
        fn gemm_acc(
            m: usize,
            k: usize,
            n: usize,
            a: Strided<'_, Self>,
            b: Strided<'_, Self>,
            c: &mut [Self],
            ldc: usize,
        ) {
            assert!(a.covers(m, k) && b.covers(k, n), "gemm operand too short");
            assert!(m == 0 || n == 0 || (m - 1) * ldc + n <= c.len(), "gemm output too short");
            // SAFETY: the asserts above keep every strided access in bounds.
            unsafe {
                matrixmultiply::$name(
                    m,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr(),
                    a.row_stride as isize,
                    a.col_stride as isize,
                    b.data.as_ptr(),
                    b.row_stride as isize,
                    b.col_stride as isize,
                    1.0,
                    c.as_mut_ptr(),
                    ldc as isize,
                    1,
                )
            }
        }
    };
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    gemm_impl!(sgemm);
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    gemm_impl!(dgemm);
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, KernelError> {
        if shape.contains(&0) {
            return Err(KernelError::InvalidShape(format!("dimensions must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(KernelError::InvalidShape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Row vector of shape `[1, n]`.
    pub fn row(data: Vec<T>) -> Self {
        Self { shape: vec![1, data.len()], data }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, KernelError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(KernelError::InvalidShape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element-wise precision conversion.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::of(x.to_f64())).collect() }
    }
}
