//! Cartesian undersampling patterns.
//!
//! A mask covers the last two axes of the k-space grid: `(kx, ky)` for
//! images, the `(ky, kz)` phase-encode plane for volumes (readout fully
//! sampled).

use rand::seq::SliceRandom;

use crate::array::ComplexArray;
use crate::error::{invalid, Result};
use crate::rng;
use crate::Scalar;

/// Largest accepted relative deviation between realized and requested acceleration.
pub const ACCELERATION_TOLERANCE: f64 = 0.15;

/// Density falloff of the Poisson-disc radius from k-space centre to corner.
pub const DEFAULT_DENSITY_FALLOFF: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoissonLayout {
    /// Exclusion radius at the k-space centre, in grid units.
    pub base_radius: f64,
    pub falloff: f64,
    pub calib: usize,
}

impl PoissonLayout {
    pub fn radius(&self, dims: [usize; 2], i: usize, j: usize) -> f64 {
        let di = (i as f64 - (dims[0] / 2) as f64) / (dims[0] as f64 / 2.0);
        let dj = (j as f64 - (dims[1] / 2) as f64) / (dims[1] as f64 / 2.0);
        let rho = ((di * di + dj * dj) / 2.0).sqrt();
        self.base_radius * (1.0 + self.falloff * rho)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    dims: [usize; 2],
    kept: Vec<bool>,
    acceleration_target: f64,
    poisson: Option<PoissonLayout>,
}

fn in_calib(dims: [usize; 2], calib: usize, i: usize, j: usize) -> bool {
    let lo0 = dims[0] / 2 - calib / 2;
    let lo1 = dims[1] / 2 - calib / 2;
    calib > 0 && i >= lo0 && i < lo0 + calib && j >= lo1 && j < lo1 + calib
}

impl SamplingMask {
    pub fn new(dims: [usize; 2], kept: Vec<bool>, acceleration_target: f64) -> Result<Self> {
        if kept.len() != dims[0] * dims[1] {
            return Err(invalid("mask length does not match its dimensions"));
        }
        if !kept.iter().any(|&k| k) {
            return Err(invalid("mask keeps no k-space location"));
        }
        Ok(Self { dims, kept, acceleration_target, poisson: None })
    }

    pub fn full(dims: [usize; 2]) -> Self {
        Self { dims, kept: vec![true; dims[0] * dims[1]], acceleration_target: 1.0, poisson: None }
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.kept[i * self.dims[1] + j]
    }

    pub fn count_kept(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn acceleration_target(&self) -> f64 {
        self.acceleration_target
    }

    /// `N / M`: grid size over kept samples.
    pub fn realized_acceleration(&self) -> f64 {
        self.kept.len() as f64 / self.count_kept() as f64
    }

    pub fn poisson_layout(&self) -> Option<&PoissonLayout> {
        self.poisson.as_ref()
    }

    pub fn to_array<T: Scalar>(&self) -> ComplexArray<T> {
        let vals: Vec<T> = self.kept.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
        ComplexArray::from_real(&self.dims, &vals).expect("mask dims are positive")
    }

    pub fn from_array<T: Scalar>(a: &ComplexArray<T>, acceleration_target: f64) -> Result<Self> {
        if a.ndim() != 2 {
            return Err(invalid("mask arrays are two-dimensional"));
        }
        let kept = a.data().iter().map(|c| c.re > T::of(0.5)).collect();
        Self::new([a.shape()[0], a.shape()[1]], kept, acceleration_target)
    }
}

fn poisson_trial(dims: [usize; 2], layout: &PoissonLayout, order: &[usize]) -> Vec<bool> {
    let [rows, cols] = dims;
    let radius: Vec<f64> =
        (0..rows * cols).map(|p| layout.radius(dims, p / cols, p % cols)).collect();
    let reach = radius.iter().cloned().fold(0.0, f64::max).ceil() as isize;
    let mut kept = vec![false; rows * cols];
    let mut disc = vec![false; rows * cols];
    for p in 0..rows * cols {
        if in_calib(dims, layout.calib, p / cols, p % cols) {
            kept[p] = true;
        }
    }
    for &p in order {
        let (i, j) = ((p / cols) as isize, (p % cols) as isize);
        if kept[p] {
            continue;
        }
        let rp = radius[p];
        let mut ok = true;
        'scan: for di in -reach..=reach {
            let ii = i + di;
            if ii < 0 || ii >= rows as isize {
                continue;
            }
            for dj in -reach..=reach {
                let jj = j + dj;
                if jj < 0 || jj >= cols as isize {
                    continue;
                }
                let q = ii as usize * cols + jj as usize;
                if disc[q] {
                    let d = ((di * di + dj * dj) as f64).sqrt();
                    if d < rp.max(radius[q]) {
                        ok = false;
                        break 'scan;
                    }
                }
            }
        }
        if ok {
            kept[p] = true;
            disc[p] = true;
        }
    }
    kept
}

/// Variable-density Poisson-disc mask with a fully sampled `calib x calib`
/// centre. The base exclusion radius is bisected until the realized
/// acceleration `N / M` lands on `accel`.
pub fn make_poisson_mask(rows: usize, cols: usize, accel: f64, calib: usize, seed: u64) -> Result<SamplingMask> {
    if !(accel >= 1.0) {
        return Err(invalid(format!("acceleration must be >= 1, got {accel}")));
    }
    if rows == 0 || cols == 0 {
        return Err(invalid("mask dimensions must be positive"));
    }
    if calib >= rows.min(cols) {
        return Err(invalid(format!("calibration size {calib} must be below min({rows}, {cols})")));
    }
    let dims = [rows, cols];
    let n = rows * cols;
    if accel == 1.0 {
        return Ok(SamplingMask::full(dims));
    }
    let budget = n as f64 / accel;
    if (calib * calib) as f64 > budget * (1.0 + ACCELERATION_TOLERANCE) {
        return Err(invalid(format!(
            "acceleration {accel} infeasible: the {calib}x{calib} calibration block alone exceeds the sample budget"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive(seed, rng::label("poisson-mask"))));

    let layout_for = |r: f64| PoissonLayout { base_radius: r, falloff: DEFAULT_DENSITY_FALLOFF, calib };
    let mut best: Option<(f64, PoissonLayout, Vec<bool>)> = None;
    let (mut lo, mut hi) = (0.25f64.ln(), (rows.max(cols) as f64).ln());
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let layout = layout_for(mid.exp());
        let kept = poisson_trial(dims, &layout, &order);
        let m = kept.iter().filter(|&&k| k).count();
        let realized = n as f64 / m as f64;
        let err = (realized - accel).abs() / accel;
        if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
            best = Some((err, layout, kept));
        }
        if realized < accel {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (err, layout, kept) = best.expect("bisection ran");
    if err > ACCELERATION_TOLERANCE {
        return Err(invalid(format!("acceleration {accel} not reachable on a {rows}x{cols} grid with calib {calib}")));
    }
    let mut mask = SamplingMask::new(dims, kept, accel)?;
    mask.poisson = Some(layout);
    Ok(mask)
}

/// Keep every `ry`-th row and `rz`-th column of the phase-encode plane.
pub fn make_uniform_mask(ny: usize, nz: usize, ry: usize, rz: usize) -> Result<SamplingMask> {
    if ry < 1 || rz < 1 {
        return Err(invalid("uniform undersampling factors must be >= 1"));
    }
    let kept = (0..ny * nz).map(|p| (p / nz) % ry == 0 && (p % nz) % rz == 0).collect();
    SamplingMask::new([ny, nz], kept, (ry * rz) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_acceleration_keeps_everything() {
        let m = make_poisson_mask(32, 32, 1.0, 8, 0).unwrap();
        assert_eq!(m.count_kept(), 32 * 32);
        let u = make_uniform_mask(8, 8, 1, 1).unwrap();
        assert_eq!(u.count_kept(), 64);
    }

    #[test]
    fn poisson_r4_on_192() {
        let m = make_poisson_mask(192, 192, 4.0, 16, 0).unwrap();
        let r = m.realized_acceleration();
        assert!((3.4..=4.6).contains(&r), "realized {r}");
        for i in 88..104 {
            for j in 88..104 {
                assert!(m.is_kept(i, j));
            }
        }
    }

    #[test]
    fn poisson_is_deterministic() {
        let a = make_poisson_mask(64, 64, 4.0, 16, 3).unwrap();
        assert_eq!(a, make_poisson_mask(64, 64, 4.0, 16, 3).unwrap());
        assert_ne!(a, make_poisson_mask(64, 64, 4.0, 16, 4).unwrap());
    }

    #[test]
    fn poisson_respects_local_radius() {
        let m = make_poisson_mask(64, 64, 6.0, 8, 1).unwrap();
        let layout = *m.poisson_layout().unwrap();
        let dims = m.dims();
        let pts: Vec<(usize, usize)> = (0..64 * 64)
            .map(|p| (p / 64, p % 64))
            .filter(|&(i, j)| m.is_kept(i, j) && !in_calib(dims, layout.calib, i, j))
            .collect();
        for (a, &(i, j)) in pts.iter().enumerate() {
            for &(k, l) in &pts[a + 1..] {
                let d = (((i as f64 - k as f64).powi(2)) + ((j as f64 - l as f64).powi(2))).sqrt();
                assert!(d >= layout.radius(dims, i, j) - 1e-12);
                assert!(d >= layout.radius(dims, k, l) - 1e-12);
            }
        }
    }

    #[test]
    fn poisson_rejects_infeasible_requests() {
        assert!(make_poisson_mask(32, 32, 16.0, 16, 0).is_err());
        assert!(make_poisson_mask(32, 32, 0.5, 4, 0).is_err());
        assert!(make_poisson_mask(16, 16, 2.0, 16, 0).is_err());
    }

    #[test]
    fn uniform_counting() {
        let m = make_uniform_mask(8, 4, 4, 1).unwrap();
        assert_eq!(m.count_kept(), 8);
        let big = make_uniform_mask(256, 80, 4, 1).unwrap();
        assert_eq!(big.realized_acceleration(), 4.0);
    }

    #[test]
    fn array_round_trip() {
        let m = make_poisson_mask(32, 32, 3.0, 8, 2).unwrap();
        let back = SamplingMask::from_array(&m.to_array::<f32>(), 3.0).unwrap();
        assert_eq!(back.kept(), m.kept());
    }
}
