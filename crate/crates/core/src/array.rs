//! Dense complex arrays in row-major order.
//!
//! Images are `(nx, ny)`, volumes `(nx, ny, nz)`; the last axis is the
//! fastest-varying one.

use num_complex::Complex;
use num_traits::Zero;

use crate::error::{invalid, Result};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexArray<T> {
    shape: Vec<usize>,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexArray<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![Complex::zero(); n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Complex<T>>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(invalid(format!("shape {shape:?} must have positive dimensions")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Array holding real values (imaginary parts zero).
    pub fn from_real(shape: &[usize], values: &[T]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| Complex::new(v, T::zero())).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> Complex<T>) -> Self {
        let mut out = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for v in out.data.iter_mut() {
            *v = f(&idx);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex<T>> {
        self.data
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, idx: &[usize]) -> Complex<T> {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: Complex<T>) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(invalid(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn norm_sqr(&self) -> T {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn norm(&self) -> T {
        self.norm_sqr().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().map(|c| c.norm()).fold(T::zero(), T::max)
    }

    /// `<self, other> = sum(conj(self) * other)`.
    pub fn inner(&self, other: &Self) -> Complex<T> {
        assert_eq!(self.shape, other.shape, "inner product shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).fold(Complex::zero(), |s, v| s + v)
    }

    pub fn map(&self, f: impl Fn(Complex<T>) -> Complex<T>) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&c| f(c)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(Complex<T>, Complex<T>) -> Complex<T>) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|c| c * s)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * alpha;
        }
    }

    pub fn abs(&self) -> Vec<T> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(invalid(format!("shape mismatch: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ComplexArray<U> {
        ComplexArray {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|c| Complex::new(U::of(c.re.as_f64()), U::of(c.im.as_f64())))
                .collect(),
        }
    }

    /// The `(nx, ny)` plane at depth `iz` of a volume.
    pub fn plane(&self, iz: usize) -> ComplexArray<T> {
        assert_eq!(self.ndim(), 3, "plane() needs a volume");
        let (nx, ny, nz) = (self.shape[0], self.shape[1], self.shape[2]);
        assert!(iz < nz);
        let data = (0..nx * ny).map(|p| self.data[p * nz + iz]).collect();
        ComplexArray { shape: vec![nx, ny], data }
    }

    pub fn set_plane(&mut self, iz: usize, plane: &ComplexArray<T>) {
        assert_eq!(self.ndim(), 3, "set_plane() needs a volume");
        let nz = self.shape[2];
        assert_eq!(plane.shape(), &self.shape[..2]);
        for (p, &v) in plane.data.iter().enumerate() {
            self.data[p * nz + iz] = v;
        }
    }

    /// Stack equally shaped planes along a new trailing axis.
    pub fn stack_planes(planes: &[ComplexArray<T>]) -> Result<Self> {
        let first = planes.first().ok_or_else(|| invalid("no planes to stack"))?;
        if first.ndim() != 2 {
            return Err(invalid("stack_planes expects 2D planes"));
        }
        let nz = planes.len();
        let mut out = Self::zeros(&[first.shape[0], first.shape[1], nz]);
        for (iz, p) in planes.iter().enumerate() {
            first.check_same_shape(p)?;
            out.set_plane(iz, p);
        }
        Ok(out)
    }
}

/// Interleave complex values into `[re, im, re, im, ...]`.
pub fn interleave<T: Scalar>(values: &[Complex<T>]) -> Vec<T> {
    values.iter().flat_map(|c| [c.re, c.im]).collect()
}

pub fn deinterleave<T: Scalar>(values: &[T]) -> Vec<Complex<T>> {
    values.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect()
}
