use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{denoise_cached, edm_coefficients, loss_weight, DenoiserParams};
use crate::array::ComplexArray;
use crate::error::{invalid, numerical, Result};
use crate::nn::Tensor3;
use crate::optim::Adam;
use crate::phantom::PhantomEnsemble;
use crate::{rng, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Base channel width of the U-Net.
    pub width: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Train on random square crops of this side (a multiple of 4).
    pub crop: Option<usize>,
    /// Mean and standard deviation of ln σ.
    pub p_mean: f64,
    pub p_std: f64,
    /// Random flips, transposes and global phase rotations.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { width: 32, steps: 2000, batch: 4, lr: 1e-3, crop: None, p_mean: -1.2, p_std: 1.2, augment: true }
    }
}

pub struct TrainOutcome<T> {
    pub params: DenoiserParams<T>,
    /// Mean weighted denoising loss of every step.
    pub losses: Vec<f64>,
}

fn augment<T: Scalar>(x: &ComplexArray<T>, crop: usize, flags: bool, r: &mut rng::Rng) -> Tensor3<T> {
    let (nx, ny) = (x.shape()[0], x.shape()[1]);
    let (ox, oy) = (r.random_range(0..=nx - crop), r.random_range(0..=ny - crop));
    let (fx, fy, tr) = if flags { (r.random::<bool>(), r.random::<bool>(), r.random::<bool>()) } else { (false, false, false) };
    let phase = if flags { r.random_range(0.0..std::f64::consts::TAU) } else { 0.0 };
    let (c, s) = (T::of(phase.cos()), T::of(phase.sin()));
    let n = crop * crop;
    let mut data = vec![T::zero(); 2 * n];
    for i in 0..crop {
        for j in 0..crop {
            let (a, b) = if tr { (j, i) } else { (i, j) };
            let a = if fx { crop - 1 - a } else { a };
            let b = if fy { crop - 1 - b } else { b };
            let v = x.data()[(ox + a) * ny + oy + b];
            data[i * crop + j] = v.re * c - v.im * s;
            data[n + i * crop + j] = v.re * s + v.im * c;
        }
    }
    Tensor3::from_vec(2, crop, crop, data)
}

/// Minimizes `E λ(σ) ‖D(x + σn, σ) − x‖²` with `ln σ ~ N(p_mean, p_std²)`.
pub fn train_denoiser<T: Scalar>(data: &PhantomEnsemble<T>, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome<T>> {
    if data.is_empty() {
        return Err(invalid("training ensemble is empty"));
    }
    let shape = data.shape();
    if shape.len() != 2 || shape[0] != shape[1] || !shape[0].is_power_of_two() || shape[0] < 4 {
        return Err(invalid(format!("training images must be square with a power-of-two side, got {shape:?}")));
    }
    let crop = cfg.crop.unwrap_or(shape[0]);
    if crop % 4 != 0 || crop > shape[0] || crop == 0 {
        return Err(invalid(format!("crop {crop} must be a positive multiple of 4 no larger than {}", shape[0])));
    }
    if cfg.batch < 1 || cfg.steps < 1 || !(cfg.lr > 0.0) || !(cfg.p_std >= 0.0) {
        return Err(invalid("training needs batch >= 1, steps >= 1, lr > 0 and p_std >= 0"));
    }
    let mut params = DenoiserParams::<T>::new(cfg.width, seed)?;
    let mut adam = Adam::new(params.num_params(), cfg.lr);
    let mut r = rng::seeded(rng::derive(seed, rng::label("denoiser-train")));
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut grad = vec![T::zero(); params.num_params()];
    let scale = 1.0 / (cfg.batch * 2 * crop * crop) as f64;
    for step in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = T::zero());
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let x = augment(&data.images[r.random_range(0..data.len())], crop, cfg.augment, &mut r);
            let sigma = (cfg.p_mean + cfg.p_std * r.sample::<f64, _>(StandardNormal)).exp();
            let k = edm_coefficients(sigma)?;
            let noisy_data = x.data.iter().map(|&v| v + T::of(sigma * r.sample::<f64, _>(StandardNormal))).collect();
            let noisy = Tensor3::from_vec(2, crop, crop, noisy_data);
            let (den, cache) = denoise_cached(&params, &noisy, &k);
            let lw = loss_weight(sigma);
            let mut dout = Tensor3::zeros(2, crop, crop);
            for ((d, &dv), &xv) in dout.data.iter_mut().zip(&den.data).zip(&x.data) {
                let e = (dv - xv).as_f64();
                loss += lw * e * e * scale;
                *d = T::of(2.0 * lw * e * scale * k.c_out);
            }
            let (g, _) = params.backward(&cache, &dout, false);
            grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(numerical(format!("denoiser training loss became non-finite at step {step}")));
        }
        losses.push(loss);
        adam.step(params.theta_mut(), &grad);
    }
    Ok(TrainOutcome { params, losses })
}

