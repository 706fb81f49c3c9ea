//! Multi-coil Cartesian MRI encoding `A = P F S` and its adjoint.

use num_complex::Complex;
use num_traits::Zero;

use crate::array::ComplexArray;
use crate::error::{invalid, Result};
use crate::fft::CenteredFft;
use crate::mask::SamplingMask;
use crate::phantom::SensitivityMaps;
use crate::Scalar;

/// Undersampled multi-coil k-space on the full grid; unsampled entries are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceMeasurements<T> {
    coils: Vec<ComplexArray<T>>,
    mask: SamplingMask,
}

impl<T: Scalar> KSpaceMeasurements<T> {
    /// Wrap per-coil k-space, zeroing every location the mask drops.
    pub fn new(mut coils: Vec<ComplexArray<T>>, mask: SamplingMask) -> Result<Self> {
        let first = coils.first().ok_or_else(|| invalid("measurements need at least one coil"))?;
        let shape = first.shape().to_vec();
        check_mask(&shape, &mask)?;
        for c in coils.iter_mut() {
            if c.shape() != shape.as_slice() {
                return Err(invalid("coil k-space arrays differ in shape"));
            }
            apply_mask(c, &mask);
        }
        Ok(Self { coils, mask })
    }

    pub fn ncoils(&self) -> usize {
        self.coils.len()
    }

    pub fn coil(&self, c: usize) -> &ComplexArray<T> {
        &self.coils[c]
    }

    pub fn coils(&self) -> &[ComplexArray<T>] {
        &self.coils
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn shape(&self) -> &[usize] {
        self.coils[0].shape()
    }

    pub fn norm_sqr(&self) -> T {
        self.coils.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Inverse of [`Self::to_array`].
    pub fn from_array(a: &ComplexArray<T>, mask: SamplingMask) -> Result<Self> {
        if a.ndim() < 3 {
            return Err(invalid("k-space stack needs a leading coil axis plus an image shape"));
        }
        let shape = &a.shape()[1..];
        let n: usize = shape.iter().product();
        let coils = a
            .data()
            .chunks_exact(n)
            .map(|c| ComplexArray::from_vec(shape, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(coils, mask)
    }

    /// Coil-major stack `(C, ...)` for the CPXA container.
    pub fn to_array(&self) -> ComplexArray<T> {
        let mut shape = vec![self.ncoils()];
        shape.extend_from_slice(self.shape());
        let data = self.coils.iter().flat_map(|v| v.data().iter().copied()).collect();
        ComplexArray::from_vec(&shape, data).expect("consistent coil stack")
    }
}

fn check_mask(shape: &[usize], mask: &SamplingMask) -> Result<()> {
    if shape.len() < 2 || shape.len() > 3 {
        return Err(invalid(format!("expected a 2D image or 3D volume, got shape {shape:?}")));
    }
    let tail = [shape[shape.len() - 2], shape[shape.len() - 1]];
    if tail != mask.dims() {
        return Err(invalid(format!("mask {:?} does not cover the trailing axes of {shape:?}", mask.dims())));
    }
    Ok(())
}

fn apply_mask<T: Scalar>(a: &mut ComplexArray<T>, mask: &SamplingMask) {
    let plane = mask.dims()[0] * mask.dims()[1];
    for (p, v) in a.data_mut().iter_mut().enumerate() {
        if !mask.kept()[p % plane] {
            *v = Complex::zero();
        }
    }
}

/// Encoding operator bound to one set of coil maps and one mask.
///
/// Images use a 2D centered transform; volumes a 3D one, so the mask can
/// select phase encodes in the `(ky, kz)` plane.
pub struct MriOperator<T: Scalar> {
    maps: SensitivityMaps<T>,
    mask: SamplingMask,
    fft: CenteredFft<T>,
}

impl<T: Scalar> MriOperator<T> {
    pub fn new(maps: SensitivityMaps<T>, mask: SamplingMask) -> Result<Self> {
        check_mask(maps.shape(), &mask)?;
        let fft = CenteredFft::new(maps.shape());
        Ok(Self { maps, mask, fft })
    }

    pub fn shape(&self) -> &[usize] {
        self.maps.shape()
    }

    pub fn maps(&self) -> &SensitivityMaps<T> {
        &self.maps
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    fn check_image(&self, x: &ComplexArray<T>) -> Result<()> {
        if x.shape() != self.shape() {
            return Err(invalid(format!("image shape {:?} does not match operator {:?}", x.shape(), self.shape())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &ComplexArray<T>) -> Result<KSpaceMeasurements<T>> {
        self.check_image(x)?;
        let coils = self
            .maps
            .coils()
            .iter()
            .map(|s| {
                let mut k = s.zip_map(x, |a, b| a * b).expect("shape checked");
                self.fft.forward_nd(&mut k);
                apply_mask(&mut k, &self.mask);
                k
            })
            .collect();
        Ok(KSpaceMeasurements { coils, mask: self.mask.clone() })
    }

    pub fn adjoint(&self, y: &KSpaceMeasurements<T>) -> Result<ComplexArray<T>> {
        if y.ncoils() != self.maps.ncoils() || y.shape() != self.shape() {
            return Err(invalid("measurements do not match the operator's coils or grid"));
        }
        let mut out = ComplexArray::zeros(self.shape());
        for (s, yc) in self.maps.coils().iter().zip(y.coils()) {
            let mut img = yc.clone();
            apply_mask(&mut img, &self.mask);
            self.fft.inverse_nd(&mut img);
            for ((o, sv), iv) in out.data_mut().iter_mut().zip(s.data()).zip(img.data()) {
                *o += sv.conj() * iv;
            }
        }
        Ok(out)
    }

    /// `A^H (A x - y)` together with `||A x - y||^2`.
    pub fn residual_gradient(&self, x: &ComplexArray<T>, y: &KSpaceMeasurements<T>) -> Result<(T, ComplexArray<T>)> {
        let ax = self.forward(x)?;
        let coils = ax
            .coils
            .iter()
            .zip(y.coils())
            .map(|(a, b)| a.sub(b))
            .collect::<Result<Vec<_>>>()?;
        let r = KSpaceMeasurements { coils, mask: self.mask.clone() };
        let loss = r.norm_sqr();
        Ok((loss, self.adjoint(&r)?))
    }
}

/// `y_c = m * F(S_c * x)` for every coil.
pub fn forward<T: Scalar>(
    x: &ComplexArray<T>,
    maps: &SensitivityMaps<T>,
    mask: &SamplingMask,
) -> Result<KSpaceMeasurements<T>> {
    MriOperator::new(maps.clone(), mask.clone())?.forward(x)
}

/// `x = sum_c conj(S_c) * F^-1(m * y_c)`.
pub fn adjoint<T: Scalar>(
    y: &KSpaceMeasurements<T>,
    maps: &SensitivityMaps<T>,
    mask: &SamplingMask,
) -> Result<ComplexArray<T>> {
    MriOperator::new(maps.clone(), mask.clone())?.adjoint(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::{fft2c, fftnc, ifft2c};
    use crate::mask::{make_poisson_mask, make_uniform_mask};
    use crate::phantom::simulate_coil_maps;
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut crate::rng::Rng) -> ComplexArray<f64> {
        ComplexArray::from_fn(shape, |_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn identity_coil_full_mask_is_plain_fft() {
        let mut rng = crate::rng::seeded(1);
        let x = random(&[16, 16], &mut rng);
        let s = SensitivityMaps::identity(&[16, 16]);
        let m = SamplingMask::full([16, 16]);
        let y = forward(&x, &s, &m).unwrap();
        assert!(y.coil(0).sub(&fft2c(&x)).unwrap().max_abs() < 1e-12);
        let back = adjoint(&y, &s, &m).unwrap();
        assert!(back.sub(&ifft2c(y.coil(0))).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_in_zero_out() {
        let s = simulate_coil_maps::<f64>(16, 16, 4, 0).unwrap();
        let m = make_poisson_mask(16, 16, 2.0, 4, 0).unwrap();
        let y = forward(&ComplexArray::zeros(&[16, 16]), &s, &m).unwrap();
        assert_eq!(y.norm_sqr(), 0.0);
        assert_eq!(adjoint(&y, &s, &m).unwrap().norm_sqr(), 0.0);
    }

    #[test]
    fn forward_is_composition_of_parts() {
        let mut rng = crate::rng::seeded(2);
        let x = random(&[16, 16], &mut rng);
        let s = simulate_coil_maps::<f64>(16, 16, 4, 3).unwrap();
        let m = make_poisson_mask(16, 16, 2.0, 4, 5).unwrap();
        let y = forward(&x, &s, &m).unwrap();
        for c in 0..4 {
            let weighted = s.coil(c).zip_map(&x, |a, b| a * b).unwrap();
            let k = fft2c(&weighted);
            for i in 0..16 {
                for j in 0..16 {
                    let want = if m.is_kept(i, j) { k.get(&[i, j]) } else { Complex::zero() };
                    assert!((y.coil(c).get(&[i, j]) - want).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unsampled_locations_are_exactly_zero() {
        let mut rng = crate::rng::seeded(4);
        let x = random(&[8, 8, 6], &mut rng);
        let s = simulate_coil_maps::<f64>(8, 8, 2, 1).unwrap().extrude(6).unwrap();
        let m = make_uniform_mask(8, 6, 2, 1).unwrap();
        let y = forward(&x, &s, &m).unwrap();
        for c in y.coils() {
            for (p, v) in c.data().iter().enumerate() {
                if !m.kept()[p % 48] {
                    assert_eq!(*v, Complex::zero());
                }
            }
        }
        // full mask, one uniform coil: a plain 3D transform
        let full = forward(&x, &SensitivityMaps::identity(&[8, 8, 6]), &SamplingMask::full([8, 6])).unwrap();
        assert!(full.coil(0).sub(&fftnc(&x)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = crate::rng::seeded(7);
        for trial in 0..12 {
            let ncoils = [1, 4, 8][trial % 3];
            let three_d = trial % 2 == 1;
            let shape: Vec<usize> = if three_d { vec![8, 12, 6] } else { vec![12, 10] };
            let maps = simulate_coil_maps::<f64>(shape[0], shape[1], ncoils, trial as u64).unwrap();
            let maps = if three_d { maps.extrude(shape[2]).unwrap() } else { maps };
            let mdims = [shape[shape.len() - 2], shape[shape.len() - 1]];
            let mask = make_poisson_mask(mdims[0], mdims[1], 2.0, 2, trial as u64).unwrap();
            let op = MriOperator::new(maps, mask.clone()).unwrap();
            let x = random(&shape, &mut rng);
            let y = KSpaceMeasurements::new((0..ncoils).map(|_| random(&shape, &mut rng)).collect(), mask).unwrap();
            let ax = op.forward(&x).unwrap();
            let lhs: Complex<f64> = ax.coils().iter().zip(y.coils()).map(|(a, b)| a.inner(b)).sum();
            let rhs = x.inner(&op.adjoint(&y).unwrap());
            assert!((lhs - rhs).norm() / lhs.norm() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let s = simulate_coil_maps::<f64>(16, 16, 2, 0).unwrap();
        let m = SamplingMask::full([16, 16]);
        assert!(forward(&ComplexArray::zeros(&[8, 8]), &s, &m).is_err());
        assert!(MriOperator::new(s, SamplingMask::full([8, 16])).is_err());
    }
}
