use super::{denoise_cached, denoise_vjp, edm_coefficients, DenoiserParams, NoiseSchedule};
use crate::error::Result;
use crate::nn::Tensor3;
use crate::Scalar;

pub const DEFAULT_SAMPLER_STEPS: usize = 10;

fn lincomb<T: Scalar>(a: T, x: &Tensor3<T>, b: T, y: &Tensor3<T>) -> Tensor3<T> {
    let data = x.data.iter().zip(&y.data).map(|(&u, &v)| a * u + b * v).collect();
    Tensor3::from_vec(x.c, x.h, x.w, data)
}

/// One Heun step from `s0` to `s1`; also returns the Euler predictor.
fn heun_step<T: Scalar>(p: &DenoiserParams<T>, x: &Tensor3<T>, s0: f64, s1: f64) -> (Tensor3<T>, Tensor3<T>) {
    let k0 = edm_coefficients(s0).expect("schedule levels are positive");
    let (den, _) = denoise_cached(p, x, &k0);
    let h = s1 - s0;
    // x' = x + h (x - D) / s0
    let pred = lincomb(T::of(1.0 + h / s0), x, T::of(-h / s0), &den);
    if s1 == 0.0 {
        return (pred.clone(), pred);
    }
    let k1 = edm_coefficients(s1).expect("schedule levels are positive");
    let (den1, _) = denoise_cached(p, &pred, &k1);
    // x + h/2 (d0 + d1)
    let d0 = lincomb(T::of(1.0 / s0), x, T::of(-1.0 / s0), &den);
    let d1 = lincomb(T::of(1.0 / s1), &pred, T::of(-1.0 / s1), &den1);
    let half = T::of(h / 2.0);
    let data = x.data.iter().zip(d0.data.iter().zip(&d1.data)).map(|(&xv, (&a, &b))| xv + half * (a + b)).collect();
    (Tensor3::from_vec(x.c, x.h, x.w, data), pred)
}

/// Deterministic second-order sampler from `q` at `sigma_start` down to 0.
///
/// `sigma_start` is clamped into the schedule range. With `n` levels above
/// zero the network is evaluated `2n - 1` times.
pub fn sample_prior<T: Scalar>(
    p: &DenoiserParams<T>,
    q: &Tensor3<T>,
    sigma_start: f64,
    n_steps: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor3<T>> {
    let sigmas = schedule.discretize(sigma_start, n_steps)?;
    let mut x = q.clone();
    for w in sigmas.windows(2) {
        x = heun_step(p, &x, w[0], w[1]).0;
    }
    Ok(x)
}

/// Runs the sampler and pulls the cotangent `g` on its output back to `q`.
pub fn sample_prior_vjp<T: Scalar>(
    p: &DenoiserParams<T>,
    q: &Tensor3<T>,
    sigma_start: f64,
    n_steps: usize,
    schedule: &NoiseSchedule,
    g: &Tensor3<T>,
) -> Result<(Tensor3<T>, Tensor3<T>)> {
    let sigmas = schedule.discretize(sigma_start, n_steps)?;
    let mut states = vec![q.clone()];
    let mut preds = Vec::new();
    for w in sigmas.windows(2) {
        let (next, pred) = heun_step(p, states.last().expect("nonempty"), w[0], w[1]);
        states.push(next);
        preds.push(pred);
    }
    let out = states.pop().expect("nonempty");
    let mut g = g.clone();
    for (i, w) in sigmas.windows(2).enumerate().rev() {
        let (s0, s1) = (w[0], w[1]);
        let h = s1 - s0;
        let x = &states[i];
        let k0 = edm_coefficients(s0)?;
        let (_, cache0) = denoise_cached(p, x, &k0);
        // J_d(v) = (v - J_D v) / s0 for d = (x - D(x)) / s0
        let jd0 = |v: &Tensor3<T>| lincomb(T::of(1.0 / s0), v, T::of(-1.0 / s0), &denoise_vjp(p, &cache0, &k0, v));
        if s1 == 0.0 {
            // x' = x + h d0(x)
            let jv = jd0(&g);
            g = lincomb(T::one(), &g, T::of(h), &jv);
            continue;
        }
        let k1 = edm_coefficients(s1)?;
        let (_, cache1) = denoise_cached(p, &preds[i], &k1);
        let ddg = denoise_vjp(p, &cache1, &k1, &g);
        let u = lincomb(T::of(h / (2.0 * s1)), &g, T::of(-h / (2.0 * s1)), &ddg);
        let inner = lincomb(T::of(h / 2.0), &g, T::of(h), &u);
        let jv = jd0(&inner);
        let data = g.data.iter().zip(u.data.iter().zip(&jv.data)).map(|(&a, (&b, &c))| a + b + c).collect();
        g = Tensor3::from_vec(g.c, g.h, g.w, data);
    }
    Ok((out, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_tensor(seed: u64) -> Tensor3<f64> {
        let mut r = rng::seeded(seed);
        Tensor3::from_vec(2, 8, 8, (0..128).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    fn scrambled() -> DenoiserParams<f64> {
        let mut p = DenoiserParams::<f64>::new(2, 3).unwrap();
        let mut r = rng::seeded(4);
        for v in p.theta_mut() {
            *v += 0.1 * r.random_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = scrambled();
        let q = random_tensor(1);
        let s = NoiseSchedule::default();
        let a = sample_prior(&p, &q, 1.0, DEFAULT_SAMPLER_STEPS, &s).unwrap();
        let b = sample_prior(&p, &q, 1.0, DEFAULT_SAMPLER_STEPS, &s).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let p = scrambled();
        let q = random_tensor(5);
        let g = random_tensor(6);
        let s = NoiseSchedule::default();
        let (out, gq) = sample_prior_vjp(&p, &q, 0.8, 4, &s, &g).unwrap();
        assert_eq!(out, sample_prior(&p, &q, 0.8, 4, &s).unwrap());
        let f = |q: &Tensor3<f64>| -> f64 {
            let o = sample_prior(&p, q, 0.8, 4, &s).unwrap();
            o.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in [0, 9, 40, 77, 127] {
            let mut qp = q.clone();
            qp.data[i] += h;
            let mut qm = q.clone();
            qm.data[i] -= h;
            let fd = (f(&qp) - f(&qm)) / (2.0 * h);
            assert!((fd - gq.data[i]).abs() <= 1e-5 * fd.abs().max(1.0), "index {i}: fd {fd} vs {}", gq.data[i]);
        }
    }

    #[test]
    fn floor_start_is_single_euler_step() {
        let p = scrambled();
        let q = random_tensor(7);
        let s = NoiseSchedule::default();
        let out = sample_prior(&p, &q, 0.002, 10, &s).unwrap();
        // one Euler step to zero returns D(q, 0.002)
        let d = super::super::precondition(&p, &q, 0.002).unwrap();
        let err: f64 = out.data.iter().zip(&d.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }
}
