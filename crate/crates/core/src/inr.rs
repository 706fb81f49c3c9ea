//! Coordinate network `I_theta`: Gaussian Fourier features followed by a
//! ReLU MLP whose output pairs are read as complex intensities.
//!
//! Two output layouts exist. In voxel mode the network maps one coordinate
//! to one complex value. In slab mode (hybrid 3D) it maps an `(x, y)`
//! coordinate to the `nz` complex values along z.

use std::fs;
use std::path::Path;

use num_complex::Complex;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::array::{interleave, ComplexArray};
use crate::checkpoint::Manifest;
use crate::container::{load_real, save_real};
use crate::error::{invalid, numerical, Error, Result};
use crate::optim::Adam;
use crate::rng::{self, Rng};
use crate::scalar::matmul;
use crate::Scalar;

pub const DEFAULT_FEATURES: usize = 128;
pub const DEFAULT_HIDDEN_LAYERS: usize = 4;
pub const DEFAULT_SCALE: f64 = 10.0;

/// Fixed random projection `B` (m x d, entries ~ N(0, scale^2)).
#[derive(Clone, Debug, PartialEq)]
pub struct FourierEncoding<T> {
    m: usize,
    d: usize,
    scale: f64,
    b: Vec<T>,
}

impl<T: Scalar> FourierEncoding<T> {
    pub fn random(m: usize, d: usize, scale: f64, rng: &mut Rng) -> Self {
        let b = (0..m * d).map(|_| T::of(scale * rng.sample::<f64, _>(StandardNormal))).collect();
        Self { m, d, scale, b }
    }

    pub fn from_matrix(m: usize, d: usize, scale: f64, b: Vec<T>) -> Result<Self> {
        if b.len() != m * d {
            return Err(invalid("encoding matrix has the wrong size"));
        }
        Ok(Self { m, d, scale, b })
    }

    pub fn features(&self) -> usize {
        self.m
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn output_dim(&self) -> usize {
        2 * self.m
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn matrix(&self) -> &[T] {
        &self.b
    }

    /// `[cos(2 pi B r), sin(2 pi B r)]`.
    pub fn encode(&self, r: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); 2 * self.m];
        self.encode_into(r, &mut out);
        out
    }

    fn encode_into(&self, r: &[T], out: &mut [T]) {
        assert_eq!(r.len(), self.d, "coordinate dimension mismatch");
        let two_pi = T::of(2.0 * std::f64::consts::PI);
        for k in 0..self.m {
            let row = &self.b[k * self.d..(k + 1) * self.d];
            let phase = two_pi * row.iter().zip(r).map(|(&b, &x)| b * x).sum::<T>();
            out[k] = phase.cos();
            out[self.m + k] = phase.sin();
        }
    }

    /// Row-major `(n, 2m)` feature matrix for a batch of coordinates.
    pub fn encode_batch(&self, coords: &[T]) -> Vec<T> {
        let n = coords.len() / self.d;
        let mut out = vec![T::zero(); n * 2 * self.m];
        for (r, o) in coords.chunks_exact(self.d).zip(out.chunks_exact_mut(2 * self.m)) {
            self.encode_into(r, o);
        }
        out
    }
}

/// Coordinates of voxel positions, `i / n` along every axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid<T> {
    dims: Vec<usize>,
    coords: Vec<T>,
}

impl<T: Scalar> CoordinateGrid<T> {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 || dims.iter().any(|&n| n == 0) {
            return Err(invalid(format!("grid dims {dims:?} must be 1 to 3 positive sizes")));
        }
        let d = dims.len();
        let n: usize = dims.iter().product();
        let mut coords = Vec::with_capacity(n * d);
        let mut idx = vec![0usize; d];
        for _ in 0..n {
            for a in 0..d {
                coords.push(T::of(idx[a] as f64 / dims[a] as f64));
            }
            for a in (0..d).rev() {
                idx[a] += 1;
                if idx[a] < dims[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(Self { dims: dims.to_vec(), coords })
    }

    pub fn from_coords(d: usize, coords: Vec<T>) -> Result<Self> {
        if d == 0 || coords.len() % d != 0 {
            return Err(invalid("coordinate buffer is not a multiple of the dimension"));
        }
        Ok(Self { dims: vec![coords.len() / d], coords })
    }

    pub fn dim(&self) -> usize {
        self.coords.len() / self.len().max(1)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        if self.dims.len() == 1 && self.coords.len() != self.dims[0] {
            self.dims[0]
        } else {
            self.dims.iter().product()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.coords[i * d..(i + 1) * d]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputLayout {
    /// One complex value per coordinate.
    Voxel,
    /// `nz` complex values per in-plane coordinate.
    Slab { nz: usize },
}

impl OutputLayout {
    pub fn out_dim(&self) -> usize {
        match *self {
            OutputLayout::Voxel => 2,
            OutputLayout::Slab { nz } => 2 * nz,
        }
    }
}

/// Network parameters `theta` as one flat vector plus layer widths.
#[derive(Clone, Debug, PartialEq)]
pub struct InrParams<T> {
    pub encoding: FourierEncoding<T>,
    widths: Vec<usize>,
    theta: Vec<T>,
    layout: OutputLayout,
}

/// Hidden activations of one forward pass.
pub struct InrForward<T> {
    hidden: Vec<Vec<T>>,
    pub output: Vec<T>,
    rows: usize,
}

impl<T: Scalar> InrForward<T> {
    /// Network outputs reshaped to an image or volume.
    pub fn image(&self, grid_dims: &[usize], layout: OutputLayout) -> ComplexArray<T> {
        let mut shape = grid_dims.to_vec();
        if let OutputLayout::Slab { nz } = layout {
            shape.push(nz);
        }
        let data = self.output.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect();
        ComplexArray::from_vec(&shape, data).expect("output matches grid")
    }
}

impl<T: Scalar> InrParams<T> {
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layout(&self) -> OutputLayout {
        self.layout
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn offsets(&self, k: usize) -> (usize, usize, usize) {
        let mut off = 0;
        for j in 0..k {
            off += self.widths[j] * self.widths[j + 1] + self.widths[j + 1];
        }
        let w_len = self.widths[k] * self.widths[k + 1];
        (off, off + w_len, off + w_len + self.widths[k + 1])
    }

    /// `(weights in x out, bias)` of layer `k`.
    pub fn layer(&self, k: usize) -> (&[T], &[T]) {
        let (a, b, c) = self.offsets(k);
        (&self.theta[a..b], &self.theta[b..c])
    }

    pub fn layer_mut(&mut self, k: usize) -> (&mut [T], &mut [T]) {
        let (a, b, c) = self.offsets(k);
        let (w, rest) = self.theta[a..c].split_at_mut(b - a);
        (w, rest)
    }

    /// Zero the output head so the network represents the all-zero image.
    pub fn zero_head(&mut self) {
        let last = self.num_layers() - 1;
        let (w, b) = self.layer_mut(last);
        w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = T::zero());
    }

    pub fn encode_grid(&self, grid: &CoordinateGrid<T>) -> Result<Vec<T>> {
        if grid.dim() != self.encoding.input_dim() {
            return Err(invalid(format!(
                "grid has {} coordinates per point, network expects {}",
                grid.dim(),
                self.encoding.input_dim()
            )));
        }
        Ok(self.encoding.encode_batch(grid.coords()))
    }

    /// Forward pass on an encoded batch (`rows x 2m`).
    pub fn forward(&self, features: &[T]) -> InrForward<T> {
        let rows = features.len() / self.widths[0];
        let mut hidden: Vec<Vec<T>> = Vec::with_capacity(self.num_layers() - 1);
        let mut output = Vec::new();
        for k in 0..self.num_layers() {
            let input: &[T] = if k == 0 { features } else { &hidden[k - 1] };
            let (w, b) = self.layer(k);
            let (fi, fo) = (self.widths[k], self.widths[k + 1]);
            let mut out = vec![T::zero(); rows * fo];
            for row in out.chunks_exact_mut(fo) {
                row.copy_from_slice(b);
            }
            matmul(false, false, rows, fi, fo, T::one(), input, w, T::one(), &mut out);
            if k + 1 < self.num_layers() {
                out.iter_mut().for_each(|v| *v = v.max(T::zero()));
                hidden.push(out);
            } else {
                output = out;
            }
        }
        InrForward { hidden, output, rows }
    }

    /// Gradient of a loss with respect to `theta`, given the gradient with
    /// respect to the raw outputs (`rows x out_dim`).
    pub fn backward(&self, features: &[T], fwd: &InrForward<T>, grad_out: &[T]) -> Vec<T> {
        let rows = fwd.rows;
        let mut grad = vec![T::zero(); self.theta.len()];
        let mut delta = grad_out.to_vec();
        for k in (0..self.num_layers()).rev() {
            let (fi, fo) = (self.widths[k], self.widths[k + 1]);
            let input: &[T] = if k == 0 { features } else { &fwd.hidden[k - 1] };
            let (a, b, c) = self.offsets(k);
            matmul(true, false, fi, rows, fo, T::one(), input, &delta, T::zero(), &mut grad[a..b]);
            let db = &mut grad[b..c];
            for row in delta.chunks_exact(fo) {
                for (g, &d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if k > 0 {
                let (w, _) = self.layer(k);
                let mut din = vec![T::zero(); rows * fi];
                matmul(false, true, rows, fo, fi, T::one(), &delta, w, T::zero(), &mut din);
                for (d, &h) in din.iter_mut().zip(&fwd.hidden[k - 1]) {
                    if h <= T::zero() {
                        *d = T::zero();
                    }
                }
                delta = din;
            }
        }
        grad
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut m = Manifest::default();
        m.set("kind", "inr");
        m.set("features", self.encoding.features());
        m.set("input_dim", self.encoding.input_dim());
        m.set("scale", self.encoding.scale());
        m.set("widths", self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","));
        m.set(
            "layout",
            match self.layout {
                OutputLayout::Voxel => "voxel".to_string(),
                OutputLayout::Slab { nz } => format!("slab:{nz}"),
            },
        );
        save_real(dir.join("encoding.cpxa"), &[self.encoding.features(), self.encoding.input_dim()], self.encoding.matrix())?;
        for k in 0..self.num_layers() {
            let (w, b) = self.layer(k);
            save_real(dir.join(format!("layer{k}_w.cpxa")), &[self.widths[k], self.widths[k + 1]], w)?;
            save_real(dir.join(format!("layer{k}_b.cpxa")), &[self.widths[k + 1]], b)?;
            m.set(&format!("layer{k}"), format!("{}x{}", self.widths[k], self.widths[k + 1]));
        }
        m.write(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::read(dir)?;
        if m.require("kind")? != "inr" {
            return Err(Error::Config(format!("{} is not an INR checkpoint", dir.display())));
        }
        let features: usize = m.parse_num("features")?;
        let input_dim: usize = m.parse_num("input_dim")?;
        let scale: f64 = m.parse_num("scale")?;
        let widths = m.parse_list("widths")?;
        let layout = match m.require("layout")? {
            "voxel" => OutputLayout::Voxel,
            s => OutputLayout::Slab {
                nz: s
                    .strip_prefix("slab:")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Config(format!("bad layout `{s}`")))?,
            },
        };
        let (_, b) = load_real(dir.join("encoding.cpxa"))?;
        let encoding = FourierEncoding::from_matrix(features, input_dim, scale, b)?;
        let mut theta = Vec::new();
        for k in 0..widths.len() - 1 {
            theta.extend(load_real::<T>(dir.join(format!("layer{k}_w.cpxa")))?.1);
            theta.extend(load_real::<T>(dir.join(format!("layer{k}_b.cpxa")))?.1);
        }
        let p = Self { encoding, widths, theta, layout };
        if p.offsets(p.num_layers() - 1).2 != p.theta.len() {
            return Err(Error::Config("checkpoint tensors do not match the manifest widths".into()));
        }
        Ok(p)
    }
}

/// Build a network with `hidden_layers` ReLU layers of width `h`.
///
/// Hidden weights use He (fan-in) normal initialization. The linear head and
/// all biases start at zero, so a fresh network represents the zero image.
pub fn init_inr_with<T: Scalar>(
    d: usize,
    m: usize,
    h: usize,
    hidden_layers: usize,
    layout: OutputLayout,
    scale: f64,
    seed: u64,
) -> Result<InrParams<T>> {
    if !(2..=3).contains(&d) {
        return Err(invalid(format!("coordinate dimension must be 2 or 3, got {d}")));
    }
    if h < 1 || m < 1 || hidden_layers < 1 {
        return Err(invalid("feature count, width and depth must be positive"));
    }
    if !(scale > 0.0) {
        return Err(invalid("Fourier feature scale must be positive"));
    }
    let encoding = FourierEncoding::random(m, d, scale, &mut rng::seeded(rng::derive(seed, rng::label("inr-encoding"))));
    let mut widths = vec![2 * m];
    widths.extend(std::iter::repeat_n(h, hidden_layers));
    widths.push(layout.out_dim());
    let total: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let mut p = InrParams { encoding, widths, theta: vec![T::zero(); total], layout };
    let mut wrng = rng::seeded(rng::derive(seed, rng::label("inr-weights")));
    for k in 0..p.num_layers() - 1 {
        let std = (2.0 / p.widths[k] as f64).sqrt();
        let (w, _) = p.layer_mut(k);
        for v in w.iter_mut() {
            *v = T::of(std * wrng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(p)
}

/// `out_dim` is 2 for voxel mode and `2 nz` for the hybrid slab head.
pub fn init_inr<T: Scalar>(d: usize, h: usize, out_dim: usize, scale: f64, seed: u64) -> Result<InrParams<T>> {
    if out_dim < 2 || out_dim % 2 != 0 {
        return Err(invalid("output width must be a positive even number"));
    }
    let layout = if out_dim == 2 { OutputLayout::Voxel } else { OutputLayout::Slab { nz: out_dim / 2 } };
    init_inr_with(d, DEFAULT_FEATURES, h, DEFAULT_HIDDEN_LAYERS, layout, scale, seed)
}

/// Evaluate `I_theta` on every grid point and reshape to an image or volume.
pub fn inr_eval<T: Scalar>(p: &InrParams<T>, grid: &CoordinateGrid<T>) -> Result<ComplexArray<T>> {
    let feats = p.encode_grid(grid)?;
    Ok(p.forward(&feats).image(grid.dims(), p.layout()))
}

/// Architecture and optimizer settings shared by every INR fit.
#[derive(Clone, Debug, PartialEq)]
pub struct InrConfig {
    pub features: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub scale: f64,
    pub lr: f64,
}

impl Default for InrConfig {
    fn default() -> Self {
        Self { features: DEFAULT_FEATURES, hidden: 256, hidden_layers: DEFAULT_HIDDEN_LAYERS, scale: DEFAULT_SCALE, lr: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub inr: InrConfig,
    pub steps: usize,
    /// Steps without a new best loss before the fit is declared stalled.
    pub patience: usize,
    /// Stop as soon as `||x - I_theta|| / ||x||` falls to this value.
    pub target_nrmse: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { inr: InrConfig::default(), steps: 2000, patience: 100, target_nrmse: None }
    }
}

pub struct FitOutcome<T> {
    pub params: InrParams<T>,
    pub losses: Vec<f64>,
}

fn fit_residual<T: Scalar>(fwd: &InrForward<T>, target: &[T]) -> (f64, Vec<T>) {
    let mut grad_out = fwd.output.clone();
    let mut loss = T::zero();
    for (g, &t) in grad_out.iter_mut().zip(target) {
        let r = *g - t;
        loss += r * r;
        *g = r + r;
    }
    (loss.as_f64(), grad_out)
}

/// `||x - I_theta(r)||^2` and its gradient with respect to `theta`.
pub fn image_fit_loss<T: Scalar>(p: &InrParams<T>, x: &ComplexArray<T>) -> Result<(f64, Vec<T>)> {
    let grid = CoordinateGrid::new(x.shape())?;
    let feats = p.encode_grid(&grid)?;
    let fwd = p.forward(&feats);
    let (loss, grad_out) = fit_residual(&fwd, &interleave(x.data()));
    Ok((loss, p.backward(&feats, &fwd, &grad_out)))
}

/// Fit the network to a discretized image by minimizing `||x - I_theta(r)||^2`.
pub fn fit_to_image<T: Scalar>(x: &ComplexArray<T>, cfg: &FitConfig, seed: u64) -> Result<FitOutcome<T>> {
    if !x.is_finite() {
        return Err(invalid("target image has non-finite entries"));
    }
    let d = x.ndim();
    let mut params = init_inr_with(d, cfg.inr.features, cfg.inr.hidden, cfg.inr.hidden_layers, OutputLayout::Voxel, cfg.inr.scale, seed)?;
    let grid = CoordinateGrid::new(x.shape())?;
    let feats = params.encode_grid(&grid)?;
    let target = interleave(x.data());
    let ref_sq = x.norm_sqr().as_f64();
    let mut opt = Adam::new(params.num_params(), cfg.inr.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let (mut best, mut since_best) = (f64::INFINITY, 0usize);
    for step in 0..cfg.steps {
        let fwd = params.forward(&feats);
        let (loss, grad_out) = fit_residual(&fwd, &target);
        if !loss.is_finite() {
            return Err(numerical(format!("image fit loss is not finite at step {step}")));
        }
        losses.push(loss);
        if loss == 0.0 || cfg.target_nrmse.is_some_and(|t| loss <= t * t * ref_sq) {
            break;
        }
        if loss < best {
            best = loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                return Err(numerical(format!("image fit stalled: no improvement for {} steps at step {step}", cfg.patience)));
            }
        }
        let grad = params.backward(&feats, &fwd, &grad_out);
        opt.step(params.theta_mut(), &grad);
    }
    Ok(FitOutcome { params, losses })
}
