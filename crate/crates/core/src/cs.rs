//! L1-wavelet compressed sensing solved with FISTA.

use crate::array::ComplexArray;
use crate::error::{invalid, numerical, Result};
use crate::mask::SamplingMask;
use crate::operator::{KSpaceMeasurements, MriOperator};
use crate::phantom::SensitivityMaps;
use crate::wavelet::{self, dwt2, idwt2, DEFAULT_LEVELS};
use crate::Scalar;

/// Seven log-spaced regularization weights from 1e-4 to 1e-1.
pub fn lambda_grid() -> Vec<f64> {
    (0..7).map(|k| 10f64.powf(-4.0 + 0.5 * k as f64)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FistaConfig {
    pub lambda: f64,
    pub iters: usize,
    pub levels: usize,
}

impl Default for FistaConfig {
    fn default() -> Self {
        Self { lambda: 1e-3, iters: 100, levels: DEFAULT_LEVELS }
    }
}

#[derive(Clone, Debug)]
pub struct FistaOutcome<T> {
    pub image: ComplexArray<T>,
    /// Objective at the zero-filled start followed by one entry per iteration.
    pub objective: Vec<f64>,
}

/// `||y - A x||^2 + lambda ||W x||_1`.
pub fn objective<T: Scalar>(
    op: &MriOperator<T>,
    y: &KSpaceMeasurements<T>,
    x: &ComplexArray<T>,
    lambda: T,
    levels: usize,
) -> Result<T> {
    let ax = op.forward(x)?;
    let fit: T = ax.coils().iter().zip(y.coils()).map(|(a, b)| a.sub(b).map(|r| r.norm_sqr())).sum::<Result<T>>()?;
    Ok(fit + lambda * wavelet::l1_norm(x, levels)?)
}

/// FISTA from the zero-filled image with step `1 / (2 ||A||^2)`, where
/// `||A|| <= 1` for unitary transforms and sum-of-squares normalized maps.
pub fn fista<T: Scalar>(op: &MriOperator<T>, y: &KSpaceMeasurements<T>, cfg: &FistaConfig) -> Result<FistaOutcome<T>> {
    if !(cfg.lambda >= 0.0) {
        return Err(invalid("lambda must be non-negative"));
    }
    if cfg.iters < 1 {
        return Err(invalid("FISTA needs at least one iteration"));
    }
    let lambda = T::of(cfg.lambda);
    let step = T::of(0.5);
    let mut x = op.adjoint(y)?;
    let start = objective(op, y, &x, lambda, cfg.levels)?;
    let mut trace = vec![start.as_f64()];
    // floor the reference so an exact start does not flag rounding noise
    let reference = start.max(y.norm_sqr() * T::epsilon()).max(T::min_positive_value());
    let mut z = x.clone();
    let mut t = T::one();
    for it in 0..cfg.iters {
        let (_, grad) = op.residual_gradient(&z, y)?;
        // z - step * 2 A^H (A z - y)
        let mut v = z.clone();
        v.axpy(-(step + step), &grad);
        let mut w = dwt2(&v, cfg.levels)?;
        w.coeffs = wavelet::soft_threshold_array(&w.coeffs, step * lambda)?;
        let x_next = idwt2(&w)?;
        let t_next = (T::one() + (T::one() + T::of(4.0) * t * t).sqrt()) / T::of(2.0);
        let beta = (t - T::one()) / t_next;
        z = x_next.clone();
        z.axpy(beta, &x_next.sub(&x)?);
        x = x_next;
        t = t_next;
        let f = objective(op, y, &x, lambda, cfg.levels)?;
        if !f.is_finite() || f > T::of(10.0) * reference {
            return Err(numerical(format!("FISTA diverged at iteration {it}: objective {f} vs start {start}")));
        }
        trace.push(f.as_f64());
    }
    Ok(FistaOutcome { image: x, objective: trace })
}

pub fn fista_l1wavelet<T: Scalar>(
    y: &KSpaceMeasurements<T>,
    maps: &SensitivityMaps<T>,
    mask: &SamplingMask,
    lambda: f64,
    iters: usize,
) -> Result<ComplexArray<T>> {
    let op = MriOperator::new(maps.clone(), mask.clone())?;
    Ok(fista(&op, y, &FistaConfig { lambda, iters, levels: DEFAULT_LEVELS })?.image)
}

/// Pick the grid value with the lowest score; ties keep the earlier entry.
pub fn select_lambda(grid: &[f64], mut score: impl FnMut(f64) -> Result<f64>) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut scores = Vec::with_capacity(grid.len());
    for &l in grid {
        scores.push((l, score(l)?));
    }
    let best = scores
        .iter()
        .cloned()
        .fold(None::<(f64, f64)>, |b, s| match b {
            Some(b) if b.1 <= s.1 => Some(b),
            _ => Some(s),
        })
        .ok_or_else(|| invalid("empty lambda grid"))?;
    Ok((best.0, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::ifft2c;
    use crate::mask::make_poisson_mask;
    use crate::operator::forward;
    use crate::phantom::{make_phantom, simulate_coil_maps};

    #[test]
    fn grid_is_log_spaced() {
        let g = lambda_grid();
        assert_eq!(g.len(), 7);
        assert!((g[0] - 1e-4).abs() < 1e-18 && (g[6] - 1e-1).abs() < 1e-15);
    }

    #[test]
    fn unregularized_full_sampling_recovers_inverse_fft() {
        let x = make_phantom::<f64>(32, 32, 1).unwrap();
        let s = SensitivityMaps::identity(&[32, 32]);
        let m = SamplingMask::full([32, 32]);
        let y = forward(&x, &s, &m).unwrap();
        let rec = fista_l1wavelet(&y, &s, &m, 0.0, 5).unwrap();
        assert!(rec.sub(&ifft2c(y.coil(0))).unwrap().max_abs() < 1e-4);
    }

    #[test]
    fn zero_data_gives_zero_image() {
        let s = simulate_coil_maps::<f64>(32, 32, 2, 0).unwrap();
        let m = make_poisson_mask(32, 32, 2.0, 8, 0).unwrap();
        let y = forward(&ComplexArray::zeros(&[32, 32]), &s, &m).unwrap();
        let rec = fista_l1wavelet(&y, &s, &m, 0.01, 10).unwrap();
        assert_eq!(rec.max_abs(), 0.0);
    }

    #[test]
    fn objective_does_not_increase_from_start() {
        let x = make_phantom::<f64>(64, 64, 2).unwrap();
        let s = simulate_coil_maps::<f64>(64, 64, 4, 1).unwrap();
        let m = make_poisson_mask(64, 64, 4.0, 16, 2).unwrap();
        let y = forward(&x, &s, &m).unwrap();
        let op = MriOperator::new(s, m).unwrap();
        for lambda in [0.0, 1e-3, 1e-2] {
            let out = fista(&op, &y, &FistaConfig { lambda, iters: 40, levels: 3 }).unwrap();
            assert!(out.objective.last().unwrap() <= &out.objective[0]);
        }
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let s = SensitivityMaps::<f64>::identity(&[16, 16]);
        let m = SamplingMask::full([16, 16]);
        let y = forward(&ComplexArray::zeros(&[16, 16]), &s, &m).unwrap();
        assert!(fista_l1wavelet(&y, &s, &m, -1.0, 3).is_err());
    }

    #[test]
    fn selection_prefers_lowest_score() {
        let (best, scores) = select_lambda(&[1.0, 2.0, 3.0], |l| Ok((l - 2.2).abs())).unwrap();
        assert_eq!(best, 2.0);
        assert_eq!(scores.len(), 3);
    }
}
