//! Image-similarity losses used to compare an INR slice with its prior
//! sample, each with the gradient with respect to the first argument.
//!
//! Gradients of real losses of complex images are stored as complex
//! numbers `dL/dre + i dL/dim`.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::array::ComplexArray;
use crate::error::{invalid, Error, Result};
use crate::nn::{self, Tensor3};
use crate::{rng, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerceptualKind {
    /// Mean of `|a - b|^2`.
    #[default]
    PixelL2,
    /// Mean squared difference of fixed random convolutional features of
    /// the magnitude images at scales 1, 2 and 4.
    RandomFeature,
}

impl fmt::Display for PerceptualKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerceptualKind::PixelL2 => "pixel-l2",
            PerceptualKind::RandomFeature => "random-feature",
        })
    }
}

impl FromStr for PerceptualKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel-l2" => Ok(PerceptualKind::PixelL2),
            "random-feature" => Ok(PerceptualKind::RandomFeature),
            _ => Err(Error::Config(format!("unknown perceptual loss '{s}' (expected pixel-l2 or random-feature)"))),
        }
    }
}

const FEATURE_CHANNELS: usize = 8;
const FEATURE_SCALES: usize = 3;
const FEATURE_SEED: u64 = 0x5eed_f00d;

struct FeatureNet<T> {
    w1: Vec<T>,
    b1: Vec<T>,
    w2: Vec<T>,
    b2: Vec<T>,
}

impl<T: Scalar> FeatureNet<T> {
    fn fixed() -> Self {
        let mut r = rng::seeded(FEATURE_SEED);
        let mut draw = |n: usize, fan_in: usize| -> Vec<T> {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| T::of(std * r.sample::<f64, _>(StandardNormal))).collect()
        };
        let w1 = draw(FEATURE_CHANNELS * 9, 9);
        let w2 = draw(FEATURE_CHANNELS * FEATURE_CHANNELS * 9, FEATURE_CHANNELS * 9);
        Self { w1, b1: vec![T::zero(); FEATURE_CHANNELS], w2, b2: vec![T::zero(); FEATURE_CHANNELS] }
    }

    fn forward(&self, m: &Tensor3<T>) -> (Tensor3<T>, Tensor3<T>) {
        let mut h1 = nn::conv3x3(m, &self.w1, &self.b1, FEATURE_CHANNELS);
        nn::relu_inplace(&mut h1);
        let mut h2 = nn::conv3x3(&h1, &self.w2, &self.b2, FEATURE_CHANNELS);
        nn::relu_inplace(&mut h2);
        (h1, h2)
    }

    fn backward(&self, m: &Tensor3<T>, h1: &Tensor3<T>, h2: &Tensor3<T>, dh2: &Tensor3<T>) -> Tensor3<T> {
        let mut dh2 = dh2.clone();
        nn::relu_backward_inplace(&mut dh2, h2);
        let (mut gw, mut gb) = (vec![T::zero(); self.w2.len()], vec![T::zero(); FEATURE_CHANNELS]);
        let mut dh1 = nn::conv3x3_backward(h1, &self.w2, &dh2, &mut gw, &mut gb, true).expect("dx requested");
        nn::relu_backward_inplace(&mut dh1, h1);
        let (mut gw, mut gb) = (vec![T::zero(); self.w1.len()], vec![T::zero(); FEATURE_CHANNELS]);
        nn::conv3x3_backward(m, &self.w1, &dh1, &mut gw, &mut gb, true).expect("dx requested")
    }
}

fn magnitude<T: Scalar>(x: &ComplexArray<T>) -> Tensor3<T> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    Tensor3::from_vec(1, h, w, x.data().iter().map(|v| v.norm()).collect())
}

fn check_pair<T: Scalar>(a: &ComplexArray<T>, b: &ComplexArray<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("perceptual loss shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.ndim() != 2 {
        return Err(invalid(format!("perceptual loss expects 2D images, got {:?}", a.shape())));
    }
    Ok(())
}

pub fn perceptual_loss<T: Scalar>(a: &ComplexArray<T>, b: &ComplexArray<T>, kind: PerceptualKind) -> Result<f64> {
    Ok(perceptual_loss_grad(a, b, kind)?.0)
}

/// Loss value and its gradient with respect to `a`.
pub fn perceptual_loss_grad<T: Scalar>(
    a: &ComplexArray<T>,
    b: &ComplexArray<T>,
    kind: PerceptualKind,
) -> Result<(f64, ComplexArray<T>)> {
    check_pair(a, b)?;
    match kind {
        PerceptualKind::PixelL2 => {
            let n = T::of(a.len() as f64);
            let loss: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).norm_sqr()).sum();
            let grad = a.zip_map(b, |x, y| (x - y) * (T::of(2.0) / n))?;
            Ok(((loss / n).as_f64(), grad))
        }
        PerceptualKind::RandomFeature => random_feature(a, b),
    }
}

fn random_feature<T: Scalar>(a: &ComplexArray<T>, b: &ComplexArray<T>) -> Result<(f64, ComplexArray<T>)> {
    let side = 1 << (FEATURE_SCALES - 1);
    if a.shape()[0] % side != 0 || a.shape()[1] % side != 0 {
        return Err(invalid(format!("random-feature loss needs sides divisible by {side}, got {:?}", a.shape())));
    }
    let net = FeatureNet::<T>::fixed();
    let (mut ma, mut mb) = (magnitude(a), magnitude(b));
    let mut pyramid = Vec::with_capacity(FEATURE_SCALES);
    let mut loss = 0.0;
    for s in 0..FEATURE_SCALES {
        if s > 0 {
            ma = nn::avg_pool2(&ma);
            mb = nn::avg_pool2(&mb);
        }
        let (h1, fa) = net.forward(&ma);
        let (_, fb) = net.forward(&mb);
        let scale = 1.0 / (FEATURE_SCALES * fa.data.len()) as f64;
        let mut d = fa.clone();
        for (dv, (&x, &y)) in d.data.iter_mut().zip(fa.data.iter().zip(&fb.data)) {
            let e = (x - y).as_f64();
            loss += e * e * scale;
            *dv = T::of(2.0 * e * scale);
        }
        pyramid.push((ma.clone(), h1, fa, d));
    }
    // coarse to fine: gradient of every scale pulled back to full resolution
    let mut dm: Option<Tensor3<T>> = None;
    for (m, h1, f, d) in pyramid.into_iter().rev() {
        let mut g = net.backward(&m, &h1, &f, &d);
        if let Some(coarse) = dm.take() {
            let up = nn::avg_pool2_backward(&coarse);
            g.data.iter_mut().zip(&up.data).for_each(|(x, &y)| *x += y);
        }
        dm = Some(g);
    }
    let dm = dm.expect("at least one scale");
    let grad = ComplexArray::from_vec(
        a.shape(),
        a.data()
            .iter()
            .zip(&dm.data)
            .map(|(&v, &g)| {
                let r = v.norm();
                if r > T::zero() { v * (g / r) } else { Complex::new(T::zero(), T::zero()) }
            })
            .collect(),
    )?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::make_phantom;

    fn pair() -> (ComplexArray<f64>, ComplexArray<f64>) {
        (make_phantom(16, 16, 1).unwrap(), make_phantom(16, 16, 2).unwrap())
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let (a, _) = pair();
        for kind in [PerceptualKind::PixelL2, PerceptualKind::RandomFeature] {
            assert_eq!(perceptual_loss(&a, &a, kind).unwrap(), 0.0);
        }
    }

    #[test]
    fn losses_are_symmetric() {
        let (a, b) = pair();
        for kind in [PerceptualKind::PixelL2, PerceptualKind::RandomFeature] {
            let (ab, ba) = (perceptual_loss(&a, &b, kind).unwrap(), perceptual_loss(&b, &a, kind).unwrap());
            assert!(ab > 0.0);
            assert!((ab - ba).abs() <= 1e-12, "{kind}: {ab} vs {ba}");
        }
    }

    #[test]
    fn pixel_l2_of_constant_offset() {
        let (a, _) = pair();
        let eps = 1e-3;
        let c = Complex::from_polar(eps, 0.7);
        let b = a.map(|v| v + c);
        let l = perceptual_loss(&a, &b, PerceptualKind::PixelL2).unwrap();
        assert!((l - eps * eps).abs() <= 1e-10);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let a = ComplexArray::<f64>::zeros(&[16, 16]);
        let b = ComplexArray::<f64>::zeros(&[16, 8]);
        assert!(perceptual_loss(&a, &b, PerceptualKind::PixelL2).is_err());
        let odd = ComplexArray::<f64>::zeros(&[18, 18]);
        assert!(perceptual_loss(&odd, &odd, PerceptualKind::RandomFeature).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (a, b) = pair();
        for kind in [PerceptualKind::PixelL2, PerceptualKind::RandomFeature] {
            let (_, g) = perceptual_loss_grad(&a, &b, kind).unwrap();
            let h = 1e-6;
            for idx in [3usize, 70, 135, 200] {
                for (k, unit) in [(0, Complex::new(h, 0.0)), (1, Complex::new(0.0, h))] {
                    let mut ap = a.clone();
                    ap.data_mut()[idx] += unit;
                    let mut am = a.clone();
                    am.data_mut()[idx] -= unit;
                    let fd = (perceptual_loss(&ap, &b, kind).unwrap() - perceptual_loss(&am, &b, kind).unwrap()) / (2.0 * h);
                    let an = if k == 0 { g.data()[idx].re } else { g.data()[idx].im };
                    assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1e-3), "{kind} idx {idx}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn kind_parses_from_text() {
        assert_eq!("random-feature".parse::<PerceptualKind>().unwrap(), PerceptualKind::RandomFeature);
        assert_eq!(PerceptualKind::PixelL2.to_string().parse::<PerceptualKind>().unwrap(), PerceptualKind::PixelL2);
        assert!("lpips".parse::<PerceptualKind>().is_err());
    }
}
