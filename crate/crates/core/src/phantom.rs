//! Synthetic ellipse phantoms and simulated receive-coil sensitivities.

use std::f64::consts::PI;

use num_complex::Complex;
use rand::Rng as _;

use crate::array::ComplexArray;
use crate::error::{invalid, Result};
use crate::rng::{self, Rng};
use crate::Scalar;

/// Modified Shepp-Logan table: intensity, semi-axes (a, b), centre (x, y), angle in degrees.
const SHEPP_LOGAN: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
];

#[derive(Clone, Debug)]
struct Ellipsoid {
    value: f64,
    axes: [f64; 3],
    centre: [f64; 3],
    cos: f64,
    sin: f64,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let dx = p[0] - self.centre[0];
        let dy = p[1] - self.centre[1];
        let xr = dx * self.cos + dy * self.sin;
        let yr = -dx * self.sin + dy * self.cos;
        let dz = p[2] - self.centre[2];
        (xr / self.axes[0]).powi(2) + (yr / self.axes[1]).powi(2) + (dz / self.axes[2]).powi(2) <= 1.0
    }
}

/// Random ellipse layout plus a smooth phase polynomial.
struct PhantomModel {
    ellipses: Vec<Ellipsoid>,
    phase: [f64; 8],
}

impl PhantomModel {
    fn random(rng: &mut Rng, three_d: bool) -> Self {
        let head_scale = rng.random_range(0.82..0.98);
        let head_rot = rng.random_range(-15.0f64..15.0).to_radians();
        let shift = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
        let mut ellipses = Vec::new();
        for (k, row) in SHEPP_LOGAN.iter().enumerate() {
            let [value, a, b, x, y, deg] = *row;
            let (mut value, mut a, mut b, mut x, mut y, mut angle) = (value, a, b, x, y, deg.to_radians());
            if k >= 2 {
                a *= rng.random_range(0.75..1.25);
                b *= rng.random_range(0.75..1.25);
                x += rng.random_range(-0.04..0.04);
                y += rng.random_range(-0.04..0.04);
                angle += rng.random_range(-12.0f64..12.0).to_radians();
                value *= rng.random_range(0.5..1.6);
            }
            let (c, s) = (head_rot.cos(), head_rot.sin());
            let (xr, yr) = (x * c - y * s, x * s + y * c);
            let (cz, az) = if !three_d {
                (0.0, 1.0)
            } else if k < 2 {
                (0.0, 1.05 + 0.1 * k as f64)
            } else {
                (rng.random_range(-0.3..0.3), rng.random_range(0.25..0.8))
            };
            angle += head_rot;
            ellipses.push(Ellipsoid {
                value,
                axes: [a * head_scale, b * head_scale, az],
                centre: [xr * head_scale + shift[0], yr * head_scale + shift[1], cz],
                cos: angle.cos(),
                sin: angle.sin(),
            });
        }
        // a few extra lesion-like features inside the brain region
        let extra = rng.random_range(1..=3);
        for _ in 0..extra {
            let r = rng.random_range(0.0..0.45) * head_scale;
            let t = rng.random_range(0.0..2.0 * PI);
            let angle: f64 = rng.random_range(0.0..PI);
            ellipses.push(Ellipsoid {
                value: rng.random_range(0.05..0.3),
                axes: [rng.random_range(0.03..0.12), rng.random_range(0.03..0.12), if three_d { rng.random_range(0.2..0.6) } else { 1.0 }],
                centre: [r * t.cos() + shift[0], r * t.sin() + shift[1], if three_d { rng.random_range(-0.4..0.4) } else { 0.0 }],
                cos: angle.cos(),
                sin: angle.sin(),
            });
        }
        let mut phase = [0.0; 8];
        phase[0] = rng.random_range(-PI..PI);
        for p in phase.iter_mut().skip(1) {
            *p = rng.random_range(-0.6..0.6);
        }
        Self { ellipses, phase }
    }

    fn value(&self, p: [f64; 3]) -> Complex<f64> {
        let mag: f64 = self.ellipses.iter().filter(|e| e.contains(p)).map(|e| e.value).sum();
        let [u, v, w] = p;
        let c = &self.phase;
        let phi = c[0] + c[1] * u + c[2] * v + c[3] * u * v + c[4] * u * u + c[5] * v * v + c[6] * w + c[7] * u * w;
        Complex::from_polar(mag.max(0.0), phi)
    }
}

fn centred(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

fn normalize_peak<T: Scalar>(mut a: ComplexArray<T>) -> ComplexArray<T> {
    let peak = a.max_abs();
    if peak > T::zero() {
        for v in a.data_mut() {
            *v = *v / peak;
        }
    }
    a
}

/// Randomized Shepp-Logan style phantom with smooth phase, peak magnitude 1.
pub fn make_phantom<T: Scalar>(nx: usize, ny: usize, variant_seed: u64) -> Result<ComplexArray<T>> {
    if nx < 16 || ny < 16 {
        return Err(invalid(format!("phantom needs at least 16x16, got {nx}x{ny}")));
    }
    let model = PhantomModel::random(&mut rng::seeded(rng::derive(variant_seed, rng::label("phantom-2d"))), false);
    let img = ComplexArray::from_fn(&[nx, ny], |i| {
        let v = model.value([centred(i[0], nx), centred(i[1], ny), 0.0]);
        Complex::new(T::of(v.re), T::of(v.im))
    });
    Ok(normalize_peak(img))
}

/// Ellipsoid phantom volume `(nx, ny, nz)`; every x-y plane is an ellipse composite.
pub fn make_phantom_volume<T: Scalar>(nx: usize, ny: usize, nz: usize, variant_seed: u64) -> Result<ComplexArray<T>> {
    if nx < 16 || ny < 16 || nz < 1 {
        return Err(invalid(format!("phantom volume needs at least 16x16x1, got {nx}x{ny}x{nz}")));
    }
    let model = PhantomModel::random(&mut rng::seeded(rng::derive(variant_seed, rng::label("phantom-3d"))), true);
    // keep the slab inside the head: sample z over [-0.6, 0.6]
    let vol = ComplexArray::from_fn(&[nx, ny, nz], |i| {
        let w = if nz == 1 { 0.0 } else { 0.6 * centred(i[2], nz) };
        let v = model.value([centred(i[0], nx), centred(i[1], ny), w]);
        Complex::new(T::of(v.re), T::of(v.im))
    });
    Ok(normalize_peak(vol))
}

/// A set of equally shaped phantoms used to train the diffusion prior.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomEnsemble<T> {
    pub images: Vec<ComplexArray<T>>,
    pub seed: u64,
}

impl<T: Scalar> PhantomEnsemble<T> {
    pub fn shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn make_ensemble<T: Scalar>(count: usize, nx: usize, ny: usize, seed: u64) -> Result<PhantomEnsemble<T>> {
    if count < 1 {
        return Err(invalid("ensemble count must be at least 1"));
    }
    let images = (0..count as u64)
        .map(|i| make_phantom(nx, ny, rng::derive(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomEnsemble { images, seed })
}

/// Per-coil complex sensitivity profiles, `values[c]` shaped like the image.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMaps<T> {
    values: Vec<ComplexArray<T>>,
}

impl<T: Scalar> SensitivityMaps<T> {
    pub fn new(values: Vec<ComplexArray<T>>) -> Result<Self> {
        let first = values.first().ok_or_else(|| invalid("at least one coil map is required"))?;
        for v in &values {
            first.check_same_shape(v)?;
        }
        Ok(Self { values })
    }

    /// Single uniform coil (`S = 1`).
    pub fn identity(shape: &[usize]) -> Self {
        let ones = ComplexArray::from_fn(shape, |_| Complex::new(T::one(), T::zero()));
        Self { values: vec![ones] }
    }

    pub fn ncoils(&self) -> usize {
        self.values.len()
    }

    pub fn shape(&self) -> &[usize] {
        self.values[0].shape()
    }

    pub fn coil(&self, c: usize) -> &ComplexArray<T> {
        &self.values[c]
    }

    pub fn coils(&self) -> &[ComplexArray<T>] {
        &self.values
    }

    /// Repeat 2D maps along a new trailing z axis.
    pub fn extrude(&self, nz: usize) -> Result<Self> {
        if self.shape().len() != 2 {
            return Err(invalid("only 2D maps can be extruded"));
        }
        let values = self
            .values
            .iter()
            .map(|m| ComplexArray::stack_planes(&vec![m.clone(); nz]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { values })
    }

    /// Coil-major stack `(C, ...)` for the CPXA container.
    pub fn to_array(&self) -> ComplexArray<T> {
        let mut shape = vec![self.ncoils()];
        shape.extend_from_slice(self.shape());
        let data = self.values.iter().flat_map(|v| v.data().iter().copied()).collect();
        ComplexArray::from_vec(&shape, data).expect("consistent coil stack")
    }

    pub fn from_array(a: &ComplexArray<T>) -> Result<Self> {
        if a.ndim() < 3 {
            return Err(invalid("coil stack needs a leading coil axis plus an image shape"));
        }
        let shape = &a.shape()[1..];
        let n: usize = shape.iter().product();
        let values = a
            .data()
            .chunks_exact(n)
            .map(|c| ComplexArray::from_vec(shape, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }

    pub fn cast<U: Scalar>(&self) -> SensitivityMaps<U> {
        SensitivityMaps { values: self.values.iter().map(|v| v.cast()).collect() }
    }
}

/// Gaussian receive lobes centred on the field-of-view boundary with a mild
/// linear phase, normalized so that `sum_c |S_c|^2 = 1` at every voxel.
pub fn simulate_coil_maps<T: Scalar>(nx: usize, ny: usize, ncoils: usize, seed: u64) -> Result<SensitivityMaps<T>> {
    if ncoils < 1 {
        return Err(invalid("ncoils must be at least 1"));
    }
    if nx < 1 || ny < 1 {
        return Err(invalid("coil map dimensions must be positive"));
    }
    let mut rng = rng::seeded(rng::derive(seed, rng::label("coil-maps")));
    let lobes: Vec<([f64; 2], f64, [f64; 3])> = (0..ncoils)
        .map(|c| {
            let jitter = rng.random_range(-0.15..0.15);
            let theta = 2.0 * PI * (c as f64 + jitter) / ncoils as f64;
            let radius = rng.random_range(1.0..1.2);
            let width = rng.random_range(0.75..0.95);
            let phase = [rng.random_range(-PI..PI), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
            ([radius * theta.cos(), radius * theta.sin()], width, phase)
        })
        .collect();
    let raw: Vec<Vec<Complex<f64>>> = lobes
        .iter()
        .map(|(centre, width, phase)| {
            let mut out = Vec::with_capacity(nx * ny);
            for ix in 0..nx {
                for iy in 0..ny {
                    let (u, v) = (centred(ix, nx), centred(iy, ny));
                    let d2 = (u - centre[0]).powi(2) + (v - centre[1]).powi(2);
                    let mag = (-d2 / (2.0 * width * width)).exp();
                    out.push(Complex::from_polar(mag, phase[0] + phase[1] * u + phase[2] * v));
                }
            }
            out
        })
        .collect();
    let norms: Vec<f64> = (0..nx * ny).map(|p| raw.iter().map(|c| c[p].norm_sqr()).sum::<f64>().sqrt()).collect();
    let values = raw
        .into_iter()
        .map(|c| {
            let data = c
                .iter()
                .zip(&norms)
                .map(|(v, &n)| {
                    let z = v / n;
                    Complex::new(T::of(z.re), T::of(z.im))
                })
                .collect();
            ComplexArray::from_vec(&[nx, ny], data)
        })
        .collect::<Result<Vec<_>>>()?;
    SensitivityMaps::new(values)
}
