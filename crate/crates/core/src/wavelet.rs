//! Orthogonal multilevel 2D wavelet transform (Daubechies, 4 vanishing
//! moments, periodic boundary) and complex soft thresholding.

use num_complex::Complex;
use num_traits::Zero;

use crate::array::ComplexArray;
use crate::error::{invalid, Result};
use crate::Scalar;

/// Daubechies low-pass reconstruction filter with 4 vanishing moments.
const DB4: [f64; 8] = [
    0.230_377_813_308_855_23,
    0.714_846_570_552_541_5,
    0.630_880_767_929_590_4,
    -0.027_983_769_416_983_85,
    -0.187_034_811_718_881_14,
    0.030_841_381_835_986_965,
    0.032_883_011_666_982_945,
    -0.010_597_401_784_997_278,
];

pub const DEFAULT_LEVELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WaveletBasis {
    Db4,
}

/// Coefficients in the usual in-place layout: the coarsest approximation
/// occupies the top-left `n0 / 2^L x n1 / 2^L` block of each plane.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletCoeffs<T> {
    pub coeffs: ComplexArray<T>,
    pub levels: usize,
    pub basis: WaveletBasis,
}

impl<T: Scalar> WaveletCoeffs<T> {
    /// Whether an in-plane position belongs to a detail subband.
    pub fn is_detail(&self, i: usize, j: usize) -> bool {
        let s = self.coeffs.shape();
        let (a0, a1) = (s[0] >> self.levels, s[1] >> self.levels);
        i >= a0 || j >= a1
    }

    pub fn norm(&self) -> T {
        self.coeffs.norm()
    }
}

fn filters<T: Scalar>() -> (Vec<T>, Vec<T>) {
    let n = DB4.len();
    let lo: Vec<T> = DB4.iter().map(|&v| T::of(v)).collect();
    let hi: Vec<T> = (0..n).map(|k| T::of(if k % 2 == 0 { DB4[n - 1 - k] } else { -DB4[n - 1 - k] })).collect();
    (lo, hi)
}

fn analyze_line<T: Scalar>(x: &[Complex<T>], out: &mut [Complex<T>], lo: &[T], hi: &[T]) {
    let n = x.len();
    let half = n / 2;
    for k in 0..half {
        let (mut a, mut d) = (Complex::zero(), Complex::zero());
        for (t, (&l, &h)) in lo.iter().zip(hi).enumerate() {
            let v = x[(2 * k + t) % n];
            a += v * l;
            d += v * h;
        }
        out[k] = a;
        out[half + k] = d;
    }
}

fn synthesize_line<T: Scalar>(c: &[Complex<T>], out: &mut [Complex<T>], lo: &[T], hi: &[T]) {
    let n = c.len();
    let half = n / 2;
    out.iter_mut().for_each(|v| *v = Complex::zero());
    for k in 0..half {
        let (a, d) = (c[k], c[half + k]);
        for (t, (&l, &h)) in lo.iter().zip(hi).enumerate() {
            out[(2 * k + t) % n] += a * l + d * h;
        }
    }
}

/// Apply a 1D line operation to every row (axis 1) and column (axis 0) of
/// the leading `r x c` block of a row-major plane with `cols` columns.
fn apply_block<T: Scalar>(
    plane: &mut [Complex<T>],
    cols: usize,
    r: usize,
    c: usize,
    rows_first: bool,
    op: &dyn Fn(&[Complex<T>], &mut [Complex<T>]),
) {
    let mut buf_in = vec![Complex::zero(); r.max(c)];
    let mut buf_out = buf_in.clone();
    let do_rows = |plane: &mut [Complex<T>], bi: &mut Vec<Complex<T>>, bo: &mut Vec<Complex<T>>| {
        for i in 0..r {
            bi[..c].copy_from_slice(&plane[i * cols..i * cols + c]);
            op(&bi[..c], &mut bo[..c]);
            plane[i * cols..i * cols + c].copy_from_slice(&bo[..c]);
        }
    };
    let do_cols = |plane: &mut [Complex<T>], bi: &mut Vec<Complex<T>>, bo: &mut Vec<Complex<T>>| {
        for j in 0..c {
            for i in 0..r {
                bi[i] = plane[i * cols + j];
            }
            op(&bi[..r], &mut bo[..r]);
            for i in 0..r {
                plane[i * cols + j] = bo[i];
            }
        }
    };
    if rows_first {
        do_rows(plane, &mut buf_in, &mut buf_out);
        do_cols(plane, &mut buf_in, &mut buf_out);
    } else {
        do_cols(plane, &mut buf_in, &mut buf_out);
        do_rows(plane, &mut buf_in, &mut buf_out);
    }
}

fn check_levels(shape: &[usize], levels: usize) -> Result<()> {
    if shape.len() != 2 && shape.len() != 3 {
        return Err(invalid("wavelet transform expects an image or a volume"));
    }
    if levels == 0 {
        return Err(invalid("at least one decomposition level is required"));
    }
    let q = 1usize << levels;
    if shape[0] % q != 0 || shape[1] % q != 0 {
        return Err(invalid(format!("in-plane shape {:?} not divisible by 2^{levels}", &shape[..2])));
    }
    Ok(())
}

fn transform_planes<T: Scalar>(x: &ComplexArray<T>, f: impl Fn(&mut [Complex<T>], usize, usize)) -> ComplexArray<T> {
    let (n0, n1) = (x.shape()[0], x.shape()[1]);
    if x.ndim() == 2 {
        let mut out = x.clone();
        f(out.data_mut(), n0, n1);
        out
    } else {
        let nz = x.shape()[2];
        let mut out = x.clone();
        for z in 0..nz {
            let mut p = x.plane(z);
            f(p.data_mut(), n0, n1);
            out.set_plane(z, &p);
        }
        out
    }
}

/// Multilevel orthogonal decomposition; volumes are transformed per x-y plane.
pub fn dwt2<T: Scalar>(x: &ComplexArray<T>, levels: usize) -> Result<WaveletCoeffs<T>> {
    check_levels(x.shape(), levels)?;
    let (lo, hi) = filters::<T>();
    let op = |a: &[Complex<T>], b: &mut [Complex<T>]| analyze_line(a, b, &lo, &hi);
    let coeffs = transform_planes(x, |plane, n0, n1| {
        for l in 0..levels {
            apply_block(plane, n1, n0 >> l, n1 >> l, true, &op);
        }
    });
    Ok(WaveletCoeffs { coeffs, levels, basis: WaveletBasis::Db4 })
}

pub fn idwt2<T: Scalar>(w: &WaveletCoeffs<T>) -> Result<ComplexArray<T>> {
    check_levels(w.coeffs.shape(), w.levels)?;
    let (lo, hi) = filters::<T>();
    let op = |a: &[Complex<T>], b: &mut [Complex<T>]| synthesize_line(a, b, &lo, &hi);
    let levels = w.levels;
    Ok(transform_planes(&w.coeffs, |plane, n0, n1| {
        for l in (0..levels).rev() {
            apply_block(plane, n1, n0 >> l, n1 >> l, false, &op);
        }
    }))
}

/// Phase-preserving shrinkage `c * max(|c| - t, 0) / |c|`.
pub fn soft_threshold<T: Scalar>(c: Complex<T>, t: T) -> Result<Complex<T>> {
    if !(t >= T::zero()) {
        return Err(invalid("threshold must be non-negative"));
    }
    Ok(shrink(c, t))
}

#[inline]
pub(crate) fn shrink<T: Scalar>(c: Complex<T>, t: T) -> Complex<T> {
    let m = c.norm();
    if m <= t || m == T::zero() {
        Complex::zero()
    } else {
        c * ((m - t) / m)
    }
}

pub fn soft_threshold_array<T: Scalar>(a: &ComplexArray<T>, t: T) -> Result<ComplexArray<T>> {
    if !(t >= T::zero()) {
        return Err(invalid("threshold must be non-negative"));
    }
    Ok(a.map(|c| shrink(c, t)))
}

/// `||W x||_1`.
pub fn l1_norm<T: Scalar>(x: &ComplexArray<T>, levels: usize) -> Result<T> {
    Ok(dwt2(x, levels)?.coeffs.data().iter().map(|c| c.norm()).sum())
}

/// `||W x||_1` and a subgradient `W^T sign(W x)` with respect to `x`.
pub fn l1_subgradient<T: Scalar>(x: &ComplexArray<T>, levels: usize) -> Result<(T, ComplexArray<T>)> {
    let mut w = dwt2(x, levels)?;
    let mut total = T::zero();
    for c in w.coeffs.data_mut() {
        let m = c.norm();
        total += m;
        *c = if m > T::zero() { *c / m } else { Complex::zero() };
    }
    Ok((total, idwt2(&w)?))
}
