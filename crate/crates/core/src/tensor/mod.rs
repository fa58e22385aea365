//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! [`Tensor`] is the storage type; [`Graph`] records operations on
//! [`Var`] handles during a forward pass and replays them backwards.
//! Everything is generic over [`Float`] so the same model code can run in
//! `f32` for training and in `f64` for finite-difference checks.

mod graph;
pub(crate) mod kernels;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use graph::{Graph, Var};

use crate::error::{Error, Result};

/// Scalar element type.
pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` on strided row/column layouts.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: Strided<'_, Self>, b: Strided<'_, Self>, beta: Self, c: &mut [Self], rsc: usize);
}

/// Read-only matrix view with row and column strides.
#[derive(Clone, Copy)]
pub struct Strided<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Strided<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `[rows, cols]` buffer.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

macro_rules! gemm_impl {
    ($t:ty, $f:path) => {
        fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: Strided<'_, Self>, b: Strided<'_, Self>, beta: Self, c: &mut [Self], rsc: usize) {
            assert!(a.fits(m, k) && b.fits(k, n), "gemm operand out of bounds");
            assert!(m == 0 || n == 0 || (m - 1) * rsc + n <= c.len(), "gemm output out of bounds");
            // SAFETY: bounds of all three views were checked above; `c` is
            // exclusively borrowed and cannot alias the read-only operands.
            unsafe {
                $f(
                    m, k, n, alpha,
                    a.data.as_ptr(), a.rs as isize, a.cs as isize,
                    b.data.as_ptr(), b.rs as isize, b.cs as isize,
                    beta, c.as_mut_ptr(), rsc as isize, 1,
                );
            }
        }
    };
}

impl Float for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }

    gemm_impl!(f32, matrixmultiply::sgemm);
}

impl Float for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    gemm_impl!(f64, matrixmultiply::dgemm);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Float = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid_shape(
                "tensor",
                shape,
                format!("buffer holds {} elements", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|v| T::of(*v)).collect())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Index of the largest element, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid_shape(op, shape, format!("axis {axis} out of range")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}
