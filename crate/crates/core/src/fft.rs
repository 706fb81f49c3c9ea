//! Centered, orthonormal discrete Fourier transforms.
//!
//! The k-space origin sits at index `n / 2` along every axis and each 1D
//! transform is scaled by `1 / sqrt(n)`, so the transforms are unitary.

use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::array::ComplexArray;
use crate::Scalar;

/// Plan cache for centered transforms along arbitrary axes.
pub struct CenteredFft<T: Scalar> {
    forward: HashMap<usize, Arc<dyn Fft<T>>>,
    inverse: HashMap<usize, Arc<dyn Fft<T>>>,
}

impl<T: Scalar> Default for CenteredFft<T> {
    fn default() -> Self {
        Self::new(&[])
    }
}

impl<T: Scalar> CenteredFft<T> {
    /// Pre-plan transforms for every axis length in `shape`.
    pub fn new(shape: &[usize]) -> Self {
        let mut me = Self { forward: HashMap::new(), inverse: HashMap::new() };
        let mut planner = FftPlanner::new();
        for &n in shape {
            me.plan(&mut planner, n);
        }
        me
    }

    fn plan(&mut self, planner: &mut FftPlanner<T>, n: usize) {
        self.forward.entry(n).or_insert_with(|| planner.plan_fft_forward(n));
        self.inverse.entry(n).or_insert_with(|| planner.plan_fft_inverse(n));
    }

    /// Plan any axis length in `shape` that is not cached yet.
    pub fn ensure(&mut self, shape: &[usize]) {
        if shape.iter().any(|n| !self.forward.contains_key(n)) {
            let mut planner = FftPlanner::new();
            for &n in shape {
                self.plan(&mut planner, n);
            }
        }
    }

    /// Transform `a` in place along the listed axes.
    ///
    /// Panics if an axis length was never planned (see [`CenteredFft::ensure`]).
    pub fn transform_axes(&self, a: &mut ComplexArray<T>, axes: &[usize], inverse: bool) {
        let shape = a.shape().to_vec();
        for &axis in axes {
            let table = if inverse { &self.inverse } else { &self.forward };
            let plan = table.get(&shape[axis]).expect("axis length not planned");
            transform_axis(a.data_mut(), &shape, axis, plan.as_ref());
        }
    }

    pub fn forward_nd(&self, a: &mut ComplexArray<T>) {
        let axes: Vec<usize> = (0..a.ndim()).collect();
        self.transform_axes(a, &axes, false);
    }

    pub fn inverse_nd(&self, a: &mut ComplexArray<T>) {
        let axes: Vec<usize> = (0..a.ndim()).collect();
        self.transform_axes(a, &axes, true);
    }
}

fn transform_axis<T: Scalar>(data: &mut [Complex<T>], shape: &[usize], axis: usize, plan: &dyn Fft<T>) {
    let n = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let scale = T::one() / T::of(n as f64).sqrt();
    let mut line = vec![Complex::new(T::zero(), T::zero()); n];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); plan.get_inplace_scratch_len()];
    for o in 0..outer {
        for s in 0..stride {
            let base = o * n * stride + s;
            for (k, v) in line.iter_mut().enumerate() {
                *v = data[base + k * stride];
            }
            // ifftshift, transform, fftshift
            line.rotate_left(n / 2);
            plan.process_with_scratch(&mut line, &mut scratch);
            line.rotate_right(n / 2);
            for (k, v) in line.iter().enumerate() {
                data[base + k * stride] = *v * scale;
            }
        }
    }
}

/// Centered orthonormal 2D transform over the first two axes; volumes are
/// transformed plane by plane.
pub fn fft2c<T: Scalar>(x: &ComplexArray<T>) -> ComplexArray<T> {
    let mut out = x.clone();
    CenteredFft::new(x.shape()).transform_axes(&mut out, &[0, 1], false);
    out
}

pub fn ifft2c<T: Scalar>(x: &ComplexArray<T>) -> ComplexArray<T> {
    let mut out = x.clone();
    CenteredFft::new(x.shape()).transform_axes(&mut out, &[0, 1], true);
    out
}

/// Centered orthonormal transform over every axis.
pub fn fftnc<T: Scalar>(x: &ComplexArray<T>) -> ComplexArray<T> {
    let mut out = x.clone();
    CenteredFft::new(x.shape()).forward_nd(&mut out);
    out
}

pub fn ifftnc<T: Scalar>(x: &ComplexArray<T>) -> ComplexArray<T> {
    let mut out = x.clone();
    CenteredFft::new(x.shape()).inverse_nd(&mut out);
    out
}
