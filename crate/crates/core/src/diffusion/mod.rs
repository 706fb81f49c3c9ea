//! Diffusion prior: a preconditioned denoiser `D(x, σ)`, its training loop
//! and a deterministic Heun sampler.
//!
//! Images enter the network as two channels (real, imaginary).

mod sampler;
mod train;
mod unet;

pub use sampler::{sample_prior, sample_prior_vjp, DEFAULT_SAMPLER_STEPS};
pub use train::{train_denoiser, TrainConfig, TrainOutcome};
pub use unet::{DenoiserParams, UnetCache};

use crate::array::ComplexArray;
use crate::error::{invalid, Result};
use crate::nn::Tensor3;
use crate::Scalar;
use num_complex::Complex;

pub const SIGMA_DATA: f64 = 0.5;

/// Scalings wrapped around the raw network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdmCoefficients {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn edm_coefficients(sigma: f64) -> Result<EdmCoefficients> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("noise level must be positive and finite, got {sigma}")));
    }
    let sd2 = SIGMA_DATA * SIGMA_DATA;
    let s2 = sigma * sigma;
    Ok(EdmCoefficients {
        c_skip: sd2 / (s2 + sd2),
        c_out: sigma * SIGMA_DATA / (s2 + sd2).sqrt(),
        c_in: 1.0 / (s2 + sd2).sqrt(),
        c_noise: sigma.ln() / 4.0,
    })
}

/// Training weight that equalizes the loss magnitude across noise levels.
pub fn loss_weight(sigma: f64) -> f64 {
    (sigma * sigma + SIGMA_DATA * SIGMA_DATA) / (sigma * SIGMA_DATA).powi(2)
}

/// Forward pass of the preconditioned denoiser, with the raw-network cache.
pub(crate) fn denoise_cached<T: Scalar>(
    p: &DenoiserParams<T>,
    x: &Tensor3<T>,
    k: &EdmCoefficients,
) -> (Tensor3<T>, UnetCache<T>) {
    let c_in = T::of(k.c_in);
    let scaled = Tensor3::from_vec(x.c, x.h, x.w, x.data.iter().map(|&v| v * c_in).collect());
    let (raw, cache) = p.forward(&scaled, T::of(k.c_noise));
    let (cs, co) = (T::of(k.c_skip), T::of(k.c_out));
    let data = x.data.iter().zip(&raw.data).map(|(&xv, &f)| cs * xv + co * f).collect();
    (Tensor3::from_vec(x.c, x.h, x.w, data), cache)
}

/// `D(x, σ) = c_skip x + c_out F(c_in x, c_noise)`.
pub fn precondition<T: Scalar>(p: &DenoiserParams<T>, x: &Tensor3<T>, sigma: f64) -> Result<Tensor3<T>> {
    let k = edm_coefficients(sigma)?;
    Ok(denoise_cached(p, x, &k).0)
}

/// Vector-Jacobian product `J_D(x)^T g`.
pub(crate) fn denoise_vjp<T: Scalar>(
    p: &DenoiserParams<T>,
    cache: &UnetCache<T>,
    k: &EdmCoefficients,
    g: &Tensor3<T>,
) -> Tensor3<T> {
    let co = T::of(k.c_out);
    let dout = Tensor3::from_vec(g.c, g.h, g.w, g.data.iter().map(|&v| v * co).collect());
    let (_, dx) = p.backward(cache, &dout, true);
    let dx = dx.expect("input gradient requested");
    let (cs, ci) = (T::of(k.c_skip), T::of(k.c_in));
    let data = g.data.iter().zip(&dx.data).map(|(&gv, &d)| cs * gv + ci * d).collect();
    Tensor3::from_vec(g.c, g.h, g.w, data)
}

/// Complex image `(h, w)` to a `(2, h, w)` tensor.
pub fn image_to_tensor<T: Scalar>(x: &ComplexArray<T>) -> Result<Tensor3<T>> {
    if x.ndim() != 2 {
        return Err(invalid(format!("expected a 2D image, got shape {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend(x.data().iter().map(|v| v.re));
    data.extend(x.data().iter().map(|v| v.im));
    Ok(Tensor3::from_vec(2, h, w, data))
}

pub fn tensor_to_image<T: Scalar>(t: &Tensor3<T>) -> ComplexArray<T> {
    assert_eq!(t.c, 2, "complex tensor has two channels");
    let n = t.plane_len();
    let data = (0..n).map(|i| Complex::new(t.data[i], t.data[n + i])).collect();
    ComplexArray::from_vec(&[t.h, t.w], data).expect("shape matches data")
}

/// Denoise a complex image at noise level `sigma`.
pub fn denoise_image<T: Scalar>(p: &DenoiserParams<T>, x: &ComplexArray<T>, sigma: f64) -> Result<ComplexArray<T>> {
    Ok(tensor_to_image(&precondition(p, &image_to_tensor(x)?, sigma)?))
}

/// Karras ρ-schedule between `sigma_min_sample` and `sigma_max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_min_sample: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_min_sample: 0.002, sigma_max: 80.0, rho: 7.0 }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min_sample: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        if !(sigma_min_sample > 0.0 && sigma_min_sample < sigma_max && rho > 0.0) {
            return Err(invalid(format!(
                "invalid noise schedule: sigma_min_sample={sigma_min_sample}, sigma_max={sigma_max}, rho={rho}"
            )));
        }
        Ok(Self { sigma_min_sample, sigma_max, rho })
    }

    /// Noise levels for `n_steps` sampler steps starting at `sigma_start`
    /// (clamped to `sigma_max`), ending with an explicit 0.
    ///
    /// A start at or below the floor collapses to `[sigma_start, 0]`.
    pub fn discretize(&self, sigma_start: f64, n_steps: usize) -> Result<Vec<f64>> {
        if n_steps < 1 {
            return Err(invalid("sampler needs at least one step"));
        }
        if !(sigma_start > 0.0) {
            return Err(invalid(format!("sigma_start must be positive, got {sigma_start}")));
        }
        let start = sigma_start.min(self.sigma_max);
        if start <= self.sigma_min_sample || n_steps == 1 {
            return Ok(vec![start, 0.0]);
        }
        let inv = 1.0 / self.rho;
        let (a, b) = (start.powf(inv), self.sigma_min_sample.powf(inv));
        let mut out: Vec<f64> = (0..n_steps)
            .map(|i| (a + i as f64 / (n_steps - 1) as f64 * (b - a)).powf(self.rho))
            .collect();
        out[0] = start;
        out.push(0.0);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn coefficient_limits() {
        let k = edm_coefficients(1e-9).unwrap();
        assert_relative_eq!(k.c_skip, 1.0, epsilon = 1e-12);
        assert!(k.c_out < 1e-8);
        assert!(edm_coefficients(0.0).is_err());
        assert!(edm_coefficients(-1.0).is_err());
    }

    #[test]
    fn coefficients_match_closed_forms() {
        for sigma in [0.1, 1.0, 10.0] {
            let k = edm_coefficients(sigma).unwrap();
            let total = sigma * sigma + 0.25;
            assert_relative_eq!(k.c_in, 1.0 / total.sqrt(), max_relative = 1e-14);
            assert_relative_eq!(k.c_skip, 0.25 / total, max_relative = 1e-14);
            assert_relative_eq!(k.c_out, 0.5 * sigma / total.sqrt(), max_relative = 1e-14);
            assert_relative_eq!(k.c_noise, sigma.ln() / 4.0, max_relative = 1e-14);
        }
    }

    proptest! {
        // c_skip + (c_out / σ_data)^2 = 1 and c_out = σ σ_data c_in
        #[test]
        fn coefficient_identities(log_sigma in -7.0f64..5.0) {
            let sigma = log_sigma.exp();
            let k = edm_coefficients(sigma).unwrap();
            prop_assert!((k.c_skip + (k.c_out / SIGMA_DATA).powi(2) - 1.0).abs() < 1e-12);
            prop_assert!((k.c_out - sigma * SIGMA_DATA * k.c_in).abs() < 1e-12 * k.c_out.max(1.0));
            prop_assert!((k.c_skip - SIGMA_DATA.powi(2) * k.c_in.powi(2)).abs() < 1e-12);
        }

        #[test]
        fn schedule_strictly_decreasing(start in 0.003f64..100.0, n in 1usize..30) {
            let s = NoiseSchedule::default().discretize(start, n).unwrap();
            prop_assert_eq!(*s.last().unwrap(), 0.0);
            prop_assert!(s.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn schedule_endpoints() {
        let sched = NoiseSchedule::default();
        let s = sched.discretize(1.0, 10).unwrap();
        assert_eq!(s.len(), 11);
        assert_eq!(s[0], 1.0);
        assert_relative_eq!(s[9], 0.002, max_relative = 1e-12);
        assert_eq!(sched.discretize(0.002, 10).unwrap(), vec![0.002, 0.0]);
        assert_eq!(sched.discretize(500.0, 3).unwrap()[0], 80.0);
        assert!(sched.discretize(1.0, 0).is_err());
        assert!(sched.discretize(0.0, 5).is_err());
        assert!(NoiseSchedule::new(1.0, 0.5, 7.0).is_err());
    }

    #[test]
    fn preconditioned_output_preserves_shape() {
        let p = DenoiserParams::<f32>::new(4, 0).unwrap();
        let x = ComplexArray::<f32>::zeros(&[64, 64]);
        let y = denoise_image(&p, &x, 0.5).unwrap();
        assert_eq!(y.shape(), &[64, 64]);
        assert!(precondition(&p, &image_to_tensor(&x).unwrap(), 0.0).is_err());
    }

    #[test]
    fn image_tensor_round_trip() {
        let x = ComplexArray::<f64>::from_fn(&[4, 8], |i| Complex::new(i[0] as f64, i[1] as f64 - 3.0));
        let t = image_to_tensor(&x).unwrap();
        assert_eq!(t.channel(1)[3], 0.0);
        assert_eq!(tensor_to_image(&t), x);
    }
}
