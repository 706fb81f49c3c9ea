//! INR reconstruction from undersampled k-space with an optional
//! regularizer: none, L1-wavelet, or a diffusion prior queried on random
//! x-y slices of the current estimate.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::array::{interleave, ComplexArray};
use crate::diffusion::{image_to_tensor, sample_prior, sample_prior_vjp, tensor_to_image, DenoiserParams, NoiseSchedule};
use crate::error::{invalid, numerical, Error, Result};
use crate::inr::{init_inr_with, CoordinateGrid, InrConfig, InrParams, OutputLayout};
use crate::mask::SamplingMask;
use crate::operator::{KSpaceMeasurements, MriOperator};
use crate::optim::Adam;
use crate::perceptual::{perceptual_loss_grad, PerceptualKind};
use crate::phantom::SensitivityMaps;
use crate::wavelet::{l1_subgradient, DEFAULT_LEVELS};
use crate::{rng, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReconMode {
    /// Single image, 2D coordinates.
    #[serde(rename = "2d")]
    TwoD,
    /// Volume with all three coordinates encoded; every slice regularized.
    #[serde(rename = "coordinate-3d")]
    Coordinate3d,
    /// Volume with x-y coordinates and a z-vector head; `k_slices` slices
    /// regularized per iteration.
    #[serde(rename = "hybrid-3d")]
    Hybrid3d,
}

impl fmt::Display for ReconMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReconMode::TwoD => "2d",
            ReconMode::Coordinate3d => "coordinate-3d",
            ReconMode::Hybrid3d => "hybrid-3d",
        })
    }
}

impl FromStr for ReconMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(ReconMode::TwoD),
            "coordinate-3d" => Ok(ReconMode::Coordinate3d),
            "hybrid-3d" => Ok(ReconMode::Hybrid3d),
            _ => Err(Error::Config(format!("unknown mode '{s}' (expected 2d, coordinate-3d or hybrid-3d)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    None,
    Wavelet,
    Diffusion,
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regularizer::None => "none",
            Regularizer::Wavelet => "wavelet",
            Regularizer::Diffusion => "diffusion",
        })
    }
}

impl FromStr for Regularizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Regularizer::None),
            "wavelet" => Ok(Regularizer::Wavelet),
            "diffusion" => Ok(Regularizer::Diffusion),
            _ => Err(Error::Config(format!("unknown regularizer '{s}' (expected none, wavelet or diffusion)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfusionConfig {
    /// Total iterations `J`.
    pub iters: usize,
    pub k_slices: usize,
    pub lambda_wavelet: f64,
    pub w0: f64,
    pub tau: f64,
    pub sigma_floor: f64,
    pub seed: u64,
    pub mode: ReconMode,
    pub regularizer: Regularizer,
    pub perceptual: PerceptualKind,
    pub sampler_steps: usize,
    /// Differentiate through the prior sampler instead of treating the
    /// prior sample as a constant target.
    pub backprop_sampler: bool,
    pub inr: InrConfig,
}

impl Default for InfusionConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            k_slices: 2,
            lambda_wavelet: 1e-3,
            w0: 1.0,
            tau: 0.2,
            sigma_floor: 0.02,
            seed: 0,
            mode: ReconMode::TwoD,
            regularizer: Regularizer::Diffusion,
            perceptual: PerceptualKind::PixelL2,
            sampler_steps: crate::diffusion::DEFAULT_SAMPLER_STEPS,
            backprop_sampler: false,
            inr: InrConfig::default(),
        }
    }
}

impl InfusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.iters < 1 {
            return bad("iters must be at least 1");
        }
        if self.k_slices < 1 {
            return bad("k_slices must be at least 1");
        }
        if !(self.w0 >= 0.0 && self.w0.is_finite()) {
            return bad("w0 must be finite and non-negative");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor <= 1.0) {
            return bad("sigma_floor must lie in (0, 1]");
        }
        if !(self.lambda_wavelet >= 0.0) {
            return bad("lambda_wavelet must be non-negative");
        }
        if self.sampler_steps < 1 {
            return bad("sampler_steps must be at least 1");
        }
        if !(self.inr.lr > 0.0) {
            return bad("INR learning rate must be positive");
        }
        Ok(())
    }
}

/// `max(1 - j/J, floor)`.
pub fn sigma_min_schedule(j: usize, total: usize, floor: f64) -> f64 {
    (1.0 - j as f64 / total as f64).max(floor)
}

/// `w0 exp(-j / (tau J))`.
pub fn weight_schedule(j: usize, total: usize, w0: f64, tau: f64) -> f64 {
    w0 * (-(j as f64) / (tau * total as f64)).exp()
}

/// Uniform draw on `[sigma_min, 1]`.
pub fn draw_sigma(sigma_min: f64, r: &mut rng::Rng) -> f64 {
    let u: f64 = r.random();
    let s = sigma_min + (1.0 - sigma_min) * u;
    s.clamp(sigma_min, 1.0)
}

/// `k` distinct z-indices out of `nz`, uniformly without replacement.
pub fn select_slices(nz: usize, k: usize, r: &mut rng::Rng) -> Result<Vec<usize>> {
    if k > nz || k == 0 {
        return Err(invalid(format!("cannot select {k} slices out of {nz}")));
    }
    Ok(rand::seq::index::sample(r, nz, k).into_vec())
}

/// Measurements, operator and coordinate grid of one reconstruction.
pub struct ReconProblem<T: Scalar> {
    op: MriOperator<T>,
    y: KSpaceMeasurements<T>,
    mode: ReconMode,
    grid: CoordinateGrid<T>,
}

impl<T: Scalar> ReconProblem<T> {
    pub fn new(y: KSpaceMeasurements<T>, maps: SensitivityMaps<T>, mask: SamplingMask, mode: ReconMode) -> Result<Self> {
        let shape = maps.shape().to_vec();
        if y.shape() != shape.as_slice() || y.ncoils() != maps.ncoils() {
            return Err(invalid("measurements do not match the coil maps"));
        }
        let grid = match (mode, shape.len()) {
            (ReconMode::TwoD, 2) => CoordinateGrid::new(&shape)?,
            (ReconMode::Coordinate3d, 3) => CoordinateGrid::new(&shape)?,
            (ReconMode::Hybrid3d, 3) => CoordinateGrid::new(&shape[..2])?,
            _ => return Err(invalid(format!("mode {mode} does not fit data of shape {shape:?}"))),
        };
        Ok(Self { op: MriOperator::new(maps, mask)?, y, mode, grid })
    }

    pub fn shape(&self) -> &[usize] {
        self.op.shape()
    }

    pub fn mode(&self) -> ReconMode {
        self.mode
    }

    pub fn operator(&self) -> &MriOperator<T> {
        &self.op
    }

    pub fn measurements(&self) -> &KSpaceMeasurements<T> {
        &self.y
    }

    pub fn grid(&self) -> &CoordinateGrid<T> {
        &self.grid
    }

    fn nz(&self) -> usize {
        if self.mode == ReconMode::TwoD { 1 } else { self.shape()[2] }
    }

    fn layout(&self) -> OutputLayout {
        match self.mode {
            ReconMode::Hybrid3d => OutputLayout::Slab { nz: self.nz() },
            _ => OutputLayout::Voxel,
        }
    }

    /// Fresh network for this problem.
    pub fn init_inr(&self, cfg: &InrConfig, seed: u64) -> Result<InrParams<T>> {
        init_inr_with(self.grid.dim(), cfg.features, cfg.hidden, cfg.hidden_layers, self.layout(), cfg.scale, seed)
    }

    fn slice(&self, image: &ComplexArray<T>, iz: usize) -> ComplexArray<T> {
        if self.mode == ReconMode::TwoD { image.clone() } else { image.plane(iz) }
    }
}

/// `||y - A I_theta(r)||^2`.
pub fn data_loss<T: Scalar>(inr: &InrParams<T>, problem: &ReconProblem<T>) -> Result<f64> {
    let image = crate::inr::inr_eval(inr, &problem.grid)?;
    Ok(problem.op.residual_gradient(&image, &problem.y)?.0.as_f64())
}

/// Regularizer targets of one iteration.
#[derive(Clone, Debug)]
pub enum RegTarget<T> {
    None,
    Wavelet { lambda: f64 },
    /// Prior samples `d` for the chosen slices, with the noise that formed
    /// each sampler input `q = I(z) + sigma n`.
    Prior { slices: Vec<usize>, sigma: f64, noise: Vec<ComplexArray<T>>, samples: Vec<ComplexArray<T>> },
}

/// Losses and image-space gradients of one iteration.
struct ImageObjective<T> {
    l_data: f64,
    l_reg: f64,
    g_data: ComplexArray<T>,
    g_reg: Option<ComplexArray<T>>,
}

fn image_objective<T: Scalar>(
    image: &ComplexArray<T>,
    problem: &ReconProblem<T>,
    target: &RegTarget<T>,
    prior: Option<&DenoiserParams<T>>,
    cfg: &InfusionConfig,
) -> Result<ImageObjective<T>> {
    let (l, g) = problem.op.residual_gradient(image, &problem.y)?;
    let g_data = g.scale(T::of(2.0));
    let (l_reg, g_reg) = match target {
        RegTarget::None => (0.0, None),
        RegTarget::Wavelet { lambda } => {
            let (n, g) = l1_subgradient(image, DEFAULT_LEVELS)?;
            (lambda * n.as_f64(), Some(g.scale(T::of(*lambda))))
        }
        RegTarget::Prior { slices, sigma, noise, samples } => {
            let mut grad = ComplexArray::zeros(image.shape());
            let inv_k = 1.0 / slices.len() as f64;
            let mut total = 0.0;
            for ((&iz, n), d) in slices.iter().zip(noise).zip(samples) {
                let a = problem.slice(image, iz);
                let (loss, mut ga) = perceptual_loss_grad(&a, d, cfg.perceptual)?;
                total += loss * inv_k;
                if cfg.backprop_sampler {
                    let p = prior.ok_or_else(|| Error::Config("sampler backpropagation needs a prior".into()))?;
                    let (_, gd) = perceptual_loss_grad(d, &a, cfg.perceptual)?;
                    let q = a.zip_map(n, |x, e| x + e)?;
                    let (_, gq) = sample_prior_vjp(
                        p,
                        &image_to_tensor(&q)?,
                        *sigma,
                        cfg.sampler_steps,
                        &NoiseSchedule::default(),
                        &image_to_tensor(&gd)?,
                    )?;
                    ga = ga.add(&tensor_to_image(&gq))?;
                }
                let ga = ga.scale(T::of(inv_k));
                if problem.mode == ReconMode::TwoD {
                    grad = grad.add(&ga)?;
                } else {
                    let cur = grad.plane(iz).add(&ga)?;
                    grad.set_plane(iz, &cur);
                }
            }
            (total, Some(grad))
        }
    };
    Ok(ImageObjective { l_data: l.as_f64(), l_reg, g_data, g_reg })
}

/// Parameter gradients of the data term, the regularizer, and the weighted
/// sum, each from its own backward pass.
pub struct LossGradients<T> {
    pub l_data: f64,
    pub l_reg: f64,
    pub data: Vec<T>,
    pub reg: Vec<T>,
    pub total: Vec<T>,
}

/// Evaluate `L_data + weight * L_reg` for fixed regularizer targets.
pub fn loss_gradients<T: Scalar>(
    inr: &InrParams<T>,
    problem: &ReconProblem<T>,
    target: &RegTarget<T>,
    weight: f64,
    prior: Option<&DenoiserParams<T>>,
    cfg: &InfusionConfig,
) -> Result<LossGradients<T>> {
    let feats = inr.encode_grid(&problem.grid)?;
    let fwd = inr.forward(&feats);
    let image = fwd.image(problem.grid.dims(), inr.layout());
    let obj = image_objective(&image, problem, target, prior, cfg)?;
    let g_reg = obj.g_reg.unwrap_or_else(|| ComplexArray::zeros(image.shape()));
    let mut g_total = obj.g_data.clone();
    g_total.axpy(T::of(weight), &g_reg);
    Ok(LossGradients {
        l_data: obj.l_data,
        l_reg: obj.l_reg,
        data: inr.backward(&feats, &fwd, &interleave(obj.g_data.data())),
        reg: inr.backward(&feats, &fwd, &interleave(g_reg.data())),
        total: inr.backward(&feats, &fwd, &interleave(g_total.data())),
    })
}

/// One row of the loss trace. For the wavelet arm `l_diffusion` holds
/// `||W I||_1` and `w` holds `lambda`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub j: usize,
    pub l_data: f64,
    pub l_diffusion: f64,
    pub w: f64,
    pub l_total: f64,
}

pub struct ReconState<T> {
    pub inr: InrParams<T>,
    pub j: usize,
    pub trace: Vec<TraceRow>,
    opt: Adam<T>,
    rng: rng::Rng,
    features: Vec<T>,
}

impl<T: Scalar> ReconState<T> {
    pub fn new(problem: &ReconProblem<T>, cfg: &InfusionConfig) -> Result<Self> {
        cfg.validate()?;
        let inr = problem.init_inr(&cfg.inr, rng::derive(cfg.seed, rng::label("recon-inr")))?;
        let features = inr.encode_grid(&problem.grid)?;
        let opt = Adam::new(inr.num_params(), cfg.inr.lr);
        let rng = rng::seeded(rng::derive(cfg.seed, rng::label("recon-prior")));
        Ok(Self { inr, j: 0, trace: Vec::new(), opt, rng, features })
    }

    /// Current estimate on the full grid.
    pub fn image(&self, problem: &ReconProblem<T>) -> ComplexArray<T> {
        self.inr.forward(&self.features).image(problem.grid.dims(), self.inr.layout())
    }
}

fn draw_prior_target<T: Scalar>(
    image: &ComplexArray<T>,
    problem: &ReconProblem<T>,
    prior: &DenoiserParams<T>,
    cfg: &InfusionConfig,
    j: usize,
    r: &mut rng::Rng,
) -> Result<RegTarget<T>> {
    let nz = problem.nz();
    let k = match problem.mode {
        ReconMode::TwoD => 1,
        ReconMode::Coordinate3d => nz,
        ReconMode::Hybrid3d => cfg.k_slices,
    };
    let slices = select_slices(nz, k, r)?;
    let sigma = draw_sigma(sigma_min_schedule(j, cfg.iters, cfg.sigma_floor), r);
    let mut noise = Vec::with_capacity(k);
    let mut samples = Vec::with_capacity(k);
    let (nx, ny) = (problem.shape()[0], problem.shape()[1]);
    for &iz in &slices {
        let n = ComplexArray::from_fn(&[nx, ny], |_| {
            Complex::new(T::of(sigma * r.sample::<f64, _>(StandardNormal)), T::of(sigma * r.sample::<f64, _>(StandardNormal)))
        });
        let q = problem.slice(image, iz).zip_map(&n, |a, b| a + b)?;
        let d = sample_prior(prior, &image_to_tensor(&q)?, sigma, cfg.sampler_steps, &NoiseSchedule::default())?;
        noise.push(n);
        samples.push(tensor_to_image(&d));
    }
    Ok(RegTarget::Prior { slices, sigma, noise, samples })
}

/// Data loss, regularizer, one joint backward pass and one Adam update.
pub fn infusion_step<T: Scalar>(
    state: &mut ReconState<T>,
    problem: &ReconProblem<T>,
    prior: Option<&DenoiserParams<T>>,
    cfg: &InfusionConfig,
) -> Result<()> {
    if state.j >= cfg.iters {
        return Err(invalid(format!("iteration {} is past the configured {} iterations", state.j, cfg.iters)));
    }
    let j = state.j;
    let fwd = state.inr.forward(&state.features);
    let image = fwd.image(problem.grid.dims(), state.inr.layout());
    let (target, w) = match cfg.regularizer {
        Regularizer::None => (RegTarget::None, 0.0),
        Regularizer::Wavelet => (RegTarget::Wavelet { lambda: cfg.lambda_wavelet }, 1.0),
        Regularizer::Diffusion => {
            let p = prior.ok_or_else(|| Error::Config("diffusion regularizer needs a trained prior".into()))?;
            let t = draw_prior_target(&image, problem, p, cfg, j, &mut state.rng)?;
            (t, weight_schedule(j, cfg.iters, cfg.w0, cfg.tau))
        }
    };
    let obj = image_objective(&image, problem, &target, prior, cfg)?;
    if !obj.l_data.is_finite() {
        return Err(numerical(format!("data loss is not finite at iteration {j}")));
    }
    if !obj.l_reg.is_finite() {
        return Err(numerical(format!("{} regularizer loss is not finite at iteration {j}", cfg.regularizer)));
    }
    let mut g = obj.g_data;
    if let Some(gr) = obj.g_reg.as_ref().filter(|_| w != 0.0) {
        g.axpy(T::of(w), gr);
    }
    let grad = state.inr.backward(&state.features, &fwd, &interleave(g.data()));
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(numerical(format!("parameter gradient is not finite at iteration {j}")));
    }
    state.opt.step(state.inr.theta_mut(), &grad);
    let (l_diffusion, w_col) = match cfg.regularizer {
        Regularizer::Wavelet => (obj.l_reg / cfg.lambda_wavelet.max(f64::MIN_POSITIVE), cfg.lambda_wavelet),
        _ => (obj.l_reg, w),
    };
    state.trace.push(TraceRow { j, l_data: obj.l_data, l_diffusion, w: w_col, l_total: obj.l_data + w * obj.l_reg });
    state.j += 1;
    Ok(())
}

pub struct ReconOutcome<T: Scalar> {
    pub image: ComplexArray<T>,
    pub state: ReconState<T>,
}

/// Run all configured iterations from a fresh network.
pub fn reconstruct<T: Scalar>(
    problem: &ReconProblem<T>,
    prior: Option<&DenoiserParams<T>>,
    cfg: &InfusionConfig,
) -> Result<ReconOutcome<T>> {
    if cfg.regularizer == Regularizer::Diffusion && prior.is_none() {
        return Err(Error::Config("diffusion regularizer needs a trained prior".into()));
    }
    let mut state = ReconState::new(problem, cfg)?;
    while state.j < cfg.iters {
        infusion_step(&mut state, problem, prior, cfg)?;
    }
    Ok(ReconOutcome { image: state.image(problem), state })
}

/// `j,L_data,L_diffusion,w,L_total` rows.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "j,L_data,L_diffusion,w,L_total")?;
    for r in trace {
        writeln!(out, "{},{},{},{},{}", r.j, r.l_data, r.l_diffusion, r.w, r.l_total)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr::inr_eval;
    use crate::mask::make_poisson_mask;
    use crate::operator::forward;
    use crate::phantom::{make_phantom, simulate_coil_maps};

    fn toy_problem(seed: u64) -> (ReconProblem<f64>, ComplexArray<f64>) {
        let x = make_phantom::<f64>(16, 16, seed).unwrap();
        let maps = simulate_coil_maps::<f64>(16, 16, 2, seed).unwrap();
        let mask = make_poisson_mask(16, 16, 2.0, 4, seed).unwrap();
        let y = forward(&x, &maps, &mask).unwrap();
        (ReconProblem::new(y, maps, mask, ReconMode::TwoD).unwrap(), x)
    }

    fn toy_cfg(reg: Regularizer) -> InfusionConfig {
        InfusionConfig {
            iters: 20,
            regularizer: reg,
            lambda_wavelet: 0.05,
            inr: InrConfig { features: 8, hidden: 16, scale: 2.0, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let total = 100;
        assert_eq!(sigma_min_schedule(0, total, 0.02), 1.0);
        assert_eq!(sigma_min_schedule(total, total, 0.02), 0.02);
        assert_eq!(sigma_min_schedule(50, total, 0.02), 0.5);
        assert_eq!(weight_schedule(0, total, 1.0, 0.2), 1.0);
        assert!((weight_schedule(total, total, 1.0, 0.2) - (-5.0f64).exp()).abs() < 1e-15);
        for j in 0..total {
            assert!(weight_schedule(j + 1, total, 1.0, 0.2) < weight_schedule(j, total, 1.0, 0.2));
            assert!(sigma_min_schedule(j + 1, total, 0.02) <= sigma_min_schedule(j, total, 0.02));
        }
    }

    #[test]
    fn sigma_draws_stay_in_range() {
        let mut r = rng::seeded(3);
        assert_eq!(draw_sigma(1.0, &mut r), 1.0);
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| draw_sigma(0.0, &mut r)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        for _ in 0..n {
            let s = draw_sigma(0.3, &mut r);
            assert!((0.3..=1.0).contains(&s));
        }
    }

    #[test]
    fn slice_selection() {
        let mut r = rng::seeded(4);
        let mut all = select_slices(16, 16, &mut r).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        let two = select_slices(16, 2, &mut r).unwrap();
        assert_eq!(two.len(), 2);
        assert_ne!(two[0], two[1]);
        assert_eq!(select_slices(16, 2, &mut rng::seeded(9)).unwrap(), select_slices(16, 2, &mut rng::seeded(9)).unwrap());
        assert!(select_slices(4, 5, &mut r).is_err());
    }

    #[test]
    fn data_loss_matches_composition() {
        let (problem, _) = toy_problem(1);
        let cfg = toy_cfg(Regularizer::None);
        let inr = problem.init_inr(&cfg.inr, 5).unwrap();
        let image = inr_eval(&inr, problem.grid()).unwrap();
        let ax = problem.operator().forward(&image).unwrap();
        let expected: f64 = ax
            .coils()
            .iter()
            .zip(problem.measurements().coils())
            .map(|(a, b)| a.sub(b).unwrap().norm_sqr())
            .sum();
        assert!((data_loss(&inr, &problem).unwrap() - expected).abs() <= 1e-8 * expected.max(1.0));
    }

    #[test]
    fn zero_head_and_zero_data_give_zero_loss() {
        let (problem, _) = toy_problem(2);
        let zero_y = KSpaceMeasurements::new(
            vec![ComplexArray::zeros(&[16, 16]); 2],
            problem.operator().mask().clone(),
        )
        .unwrap();
        let problem =
            ReconProblem::new(zero_y, problem.operator().maps().clone(), problem.operator().mask().clone(), ReconMode::TwoD).unwrap();
        let mut inr = problem.init_inr(&toy_cfg(Regularizer::None).inr, 0).unwrap();
        inr.zero_head();
        assert_eq!(data_loss(&inr, &problem).unwrap(), 0.0);
    }

    #[test]
    fn mode_must_fit_data() {
        let (problem, _) = toy_problem(3);
        let maps = problem.operator().maps().clone();
        let mask = problem.operator().mask().clone();
        assert!(ReconProblem::new(problem.measurements().clone(), maps, mask, ReconMode::Hybrid3d).is_err());
    }

    #[test]
    fn wavelet_arm_gradient_is_additive() {
        let (problem, _) = toy_problem(4);
        let cfg = toy_cfg(Regularizer::Wavelet);
        let inr = problem.init_inr(&cfg.inr, 1).unwrap();
        let g = loss_gradients(&inr, &problem, &RegTarget::Wavelet { lambda: 0.05 }, 0.7, None, &cfg).unwrap();
        for ((t, d), r) in g.total.iter().zip(&g.data).zip(&g.reg) {
            assert!((t - (d + 0.7 * r)).abs() <= 1e-10 * t.abs().max(1.0));
        }
    }

    #[test]
    fn trace_grows_by_one_per_step_and_data_loss_falls() {
        let (problem, _) = toy_problem(5);
        let cfg = toy_cfg(Regularizer::Wavelet);
        let mut state = ReconState::new(&problem, &cfg).unwrap();
        for k in 1..=cfg.iters {
            infusion_step(&mut state, &problem, None, &cfg).unwrap();
            assert_eq!(state.trace.len(), k);
            assert_eq!(state.j, k);
        }
        assert!(state.trace.last().unwrap().l_data < state.trace[0].l_data);
        assert!(infusion_step(&mut state, &problem, None, &cfg).is_err());
    }

    #[test]
    fn diffusion_arm_without_prior_is_a_configuration_error() {
        let (problem, _) = toy_problem(6);
        let err = reconstruct(&problem, None, &toy_cfg(Regularizer::Diffusion)).err().unwrap();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn reconstruction_is_deterministic() {
        let (problem, _) = toy_problem(7);
        let cfg = toy_cfg(Regularizer::Wavelet);
        let a = reconstruct(&problem, None, &cfg).unwrap();
        let b = reconstruct(&problem, None, &cfg).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.state.trace, b.state.trace);
    }

    #[test]
    fn config_validation() {
        let mut cfg = InfusionConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.iters = 0;
        assert!(cfg.validate().is_err());
        let cfg = InfusionConfig { tau: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = InfusionConfig { sigma_floor: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert_eq!("hybrid-3d".parse::<ReconMode>().unwrap(), ReconMode::Hybrid3d);
        assert_eq!(Regularizer::Diffusion.to_string(), "diffusion");
        assert!("tv".parse::<Regularizer>().is_err());
    }
}
