//! Experiment orchestration: one shared measurement realization, several
//! reconstruction arms, metrics and per-arm artifacts on disk.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::array::ComplexArray;
use crate::checkpoint::Manifest;
use crate::container::{load_array, save_array};
use crate::cs::{fista, lambda_grid, select_lambda, FistaConfig};
use crate::diffusion::DenoiserParams;
use crate::error::{Error, Result};
use crate::inr::InrConfig;
use crate::mask::{make_poisson_mask, make_uniform_mask, SamplingMask};
use crate::memory;
use crate::metrics::nrmse;
use crate::operator::{KSpaceMeasurements, MriOperator};
use crate::perceptual::PerceptualKind;
use crate::phantom::{make_phantom, make_phantom_volume, simulate_coil_maps, SensitivityMaps};
use crate::recon::{reconstruct, write_trace_csv, InfusionConfig, ReconMode, ReconProblem, Regularizer};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    ZeroFilled,
    CsWavelet,
    InrNone,
    InrWavelet,
    Infusion,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::ZeroFilled, Arm::CsWavelet, Arm::InrNone, Arm::InrWavelet, Arm::Infusion];

    pub fn name(&self) -> &'static str {
        match self {
            Arm::ZeroFilled => "zero-filled",
            Arm::CsWavelet => "cs-wavelet",
            Arm::InrNone => "inr-none",
            Arm::InrWavelet => "inr-wavelet",
            Arm::Infusion => "infusion",
        }
    }

    fn regularizer(&self) -> Option<Regularizer> {
        match self {
            Arm::InrNone => Some(Regularizer::None),
            Arm::InrWavelet => Some(Regularizer::Wavelet),
            Arm::Infusion => Some(Regularizer::Diffusion),
            _ => None,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhantomSpec {
    SheppLogan {
        nx: usize,
        ny: usize,
        /// Slices; absent for a 2D image.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nz: Option<usize>,
        variant_seed: u64,
    },
    /// A CPXA image or volume used as ground truth.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MaskSpec {
    Poisson { acceleration: f64, calib: usize, seed: u64 },
    Uniform { ry: usize, rz: usize },
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoilSpec {
    pub count: usize,
    pub seed: u64,
}

impl Default for CoilSpec {
    fn default() -> Self {
        Self { count: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsSpec {
    /// Fixed weight; when absent the grid value with the lowest NRMSE
    /// against the ground truth is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub iters: usize,
}

impl Default for CsSpec {
    fn default() -> Self {
        Self { lambda: None, iters: 100 }
    }
}

/// INR architecture, optimizer and regularizer-schedule settings shared by
/// the INR arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InrSpec {
    pub iters: usize,
    pub mode: ReconMode,
    pub features: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub scale: f64,
    pub lr: f64,
    pub lambda_wavelet: f64,
    pub w0: f64,
    pub tau: f64,
    pub sigma_floor: f64,
    pub k_slices: usize,
    pub perceptual: PerceptualKind,
    pub sampler_steps: usize,
    pub backprop_sampler: bool,
}

impl Default for InrSpec {
    fn default() -> Self {
        let c = InfusionConfig::default();
        Self {
            iters: c.iters,
            mode: c.mode,
            features: c.inr.features,
            hidden: c.inr.hidden,
            hidden_layers: c.inr.hidden_layers,
            scale: c.inr.scale,
            lr: c.inr.lr,
            lambda_wavelet: c.lambda_wavelet,
            w0: c.w0,
            tau: c.tau,
            sigma_floor: c.sigma_floor,
            k_slices: c.k_slices,
            perceptual: c.perceptual,
            sampler_steps: c.sampler_steps,
            backprop_sampler: c.backprop_sampler,
        }
    }
}

impl InrSpec {
    pub fn infusion_config(&self, regularizer: Regularizer, seed: u64) -> InfusionConfig {
        InfusionConfig {
            iters: self.iters,
            k_slices: self.k_slices,
            lambda_wavelet: self.lambda_wavelet,
            w0: self.w0,
            tau: self.tau,
            sigma_floor: self.sigma_floor,
            seed,
            mode: self.mode,
            regularizer,
            perceptual: self.perceptual,
            sampler_steps: self.sampler_steps,
            backprop_sampler: self.backprop_sampler,
            inr: InrConfig {
                features: self.features,
                hidden: self.hidden,
                hidden_layers: self.hidden_layers,
                scale: self.scale,
                lr: self.lr,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub mask: MaskSpec,
    #[serde(default)]
    pub coils: CoilSpec,
    /// Standard deviation of the complex Gaussian noise added to each
    /// real and imaginary k-space component.
    #[serde(default)]
    pub noise_std: f64,
    pub arms: Vec<Arm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PathBuf>,
    #[serde(default)]
    pub cs: CsSpec,
    #[serde(default)]
    pub inr: InrSpec,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("experiment spec: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    /// Parse a spec file; relative paths are taken from the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut spec = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.output_dir = resolve(base, &spec.output_dir);
        spec.prior = spec.prior.map(|p| resolve(base, &p));
        if let PhantomSpec::File { path } = &mut spec.phantom {
            *path = resolve(base, path);
        }
        Ok(spec)
    }

    /// Checks every precondition that can fail before any compute.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.arms.is_empty() {
            return cfg("no arms requested".into());
        }
        if self.arms.iter().collect::<BTreeSet<_>>().len() != self.arms.len() {
            return cfg("duplicate arms requested".into());
        }
        if self.arms.contains(&Arm::Infusion) {
            match &self.prior {
                None => return cfg("the infusion arm needs a prior checkpoint".into()),
                Some(p) if !p.join("manifest.txt").is_file() => {
                    return cfg(format!("prior checkpoint {} does not exist", p.display()))
                }
                _ => {}
            }
        }
        if let PhantomSpec::File { path } = &self.phantom {
            if !path.is_file() {
                return cfg(format!("phantom file {} does not exist", path.display()));
            }
        }
        if let PhantomSpec::SheppLogan { nz: Some(0), .. } = self.phantom {
            return cfg("nz must be positive".into());
        }
        if self.coils.count < 1 {
            return cfg("coil count must be at least 1".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return cfg("noise_std must be finite and non-negative".into());
        }
        if self.cs.iters < 1 {
            return cfg("cs.iters must be at least 1".into());
        }
        self.inr.infusion_config(Regularizer::None, self.seed).validate()
    }

    fn ground_truth(&self) -> Result<ComplexArray<f32>> {
        let x = match &self.phantom {
            PhantomSpec::SheppLogan { nx, ny, nz: None, variant_seed } => make_phantom(*nx, *ny, *variant_seed)?,
            PhantomSpec::SheppLogan { nx, ny, nz: Some(nz), variant_seed } => make_phantom_volume(*nx, *ny, *nz, *variant_seed)?,
            PhantomSpec::File { path } => load_array(path)?,
        };
        let peak = x.max_abs();
        if !(peak > 0.0) || !x.is_finite() {
            return Err(Error::Config("ground truth must be finite and not all zero".into()));
        }
        Ok(x.scale(1.0 / peak))
    }
}

/// Settings for a standalone reconstruction from stored k-space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ReconSpec::default_regularizer")]
    pub regularizer: Regularizer,
    #[serde(default)]
    pub inr: InrSpec,
}

impl Default for ReconSpec {
    fn default() -> Self {
        Self { seed: 0, regularizer: Self::default_regularizer(), inr: InrSpec::default() }
    }
}

impl ReconSpec {
    fn default_regularizer() -> Regularizer {
        Regularizer::Diffusion
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("recon config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    pub fn config(&self) -> Result<InfusionConfig> {
        let cfg = self.inr.infusion_config(self.regularizer, self.seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `P F S x` plus complex Gaussian noise of standard deviation `noise_std`
/// on each real and imaginary component, drawn from `noise_seed`.
pub fn simulate_kspace(
    x: &ComplexArray<f32>,
    maps: &SensitivityMaps<f32>,
    mask: &SamplingMask,
    noise_std: f64,
    noise_seed: u64,
) -> Result<KSpaceMeasurements<f32>> {
    let op = MriOperator::new(maps.clone(), mask.clone())?;
    let clean = op.forward(x)?;
    let mut r = rng::seeded(noise_seed);
    let coils = clean
        .coils()
        .iter()
        .map(|c| {
            let mut c = c.clone();
            if noise_std > 0.0 {
                for v in c.data_mut() {
                    let n: Complex<f64> = Complex::new(r.sample(StandardNormal), r.sample(StandardNormal));
                    *v += Complex::new((noise_std * n.re) as f32, (noise_std * n.im) as f32);
                }
            }
            c
        })
        .collect();
    KSpaceMeasurements::new(coils, mask.clone())
}

/// Measurement realization shared by every arm.
pub struct Acquisition {
    pub ground_truth: ComplexArray<f32>,
    pub maps: SensitivityMaps<f32>,
    pub mask: SamplingMask,
    pub kspace: KSpaceMeasurements<f32>,
}

pub fn acquire(spec: &ExperimentSpec) -> Result<Acquisition> {
    let x = spec.ground_truth()?;
    let shape = x.shape().to_vec();
    if !(2..=3).contains(&shape.len()) {
        return Err(Error::Config(format!("ground truth must be 2D or 3D, got {shape:?}")));
    }
    let maps2 = simulate_coil_maps::<f32>(shape[0], shape[1], spec.coils.count, spec.coils.seed)?;
    let maps = if shape.len() == 3 { maps2.extrude(shape[2])? } else { maps2 };
    let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mask = match &spec.mask {
        MaskSpec::Poisson { acceleration, calib, seed } => make_poisson_mask(rows, cols, *acceleration, *calib, *seed)?,
        MaskSpec::Uniform { ry, rz } => make_uniform_mask(rows, cols, *ry, *rz)?,
        MaskSpec::Full => SamplingMask::full([rows, cols]),
    };
    let kspace = simulate_kspace(&x, &maps, &mask, spec.noise_std, rng::derive(spec.seed, rng::label("measurement-noise")))?;
    Ok(Acquisition { ground_truth: x, maps, mask, kspace })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub arm: Arm,
    pub nrmse: f64,
    pub runtime_s: f64,
    pub peak_mem_bytes: usize,
}

pub struct ArmOutput {
    pub arm: Arm,
    pub image: ComplexArray<f32>,
    pub metrics: MetricsRow,
}

pub struct ExperimentReport {
    pub ground_truth: ComplexArray<f32>,
    pub arms: Vec<ArmOutput>,
    /// Resolved settings (chosen weights, realized acceleration, parameter
    /// counts) as echoed to `run.txt`.
    pub resolved: Manifest,
}

impl ExperimentReport {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.arms.iter().map(|a| a.metrics.clone()).collect()
    }

    pub fn nrmse(&self, arm: Arm) -> Option<f64> {
        self.arms.iter().find(|a| a.arm == arm).map(|a| a.metrics.nrmse)
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "arm,nrmse,runtime_s,peak_mem_bytes")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.arm, r.nrmse, r.runtime_s, r.peak_mem_bytes)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some("arm,nrmse,runtime_s,peak_mem_bytes") {
        return Err(Error::Config(format!("{} has an unexpected header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Config(format!("malformed metrics row '{l}'"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MetricsRow {
                arm: f[0].parse()?,
                nrmse: f[1].parse().map_err(|_| bad())?,
                runtime_s: f[2].parse().map_err(|_| bad())?,
                peak_mem_bytes: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn load_prior(spec: &ExperimentSpec) -> Result<Option<DenoiserParams<f32>>> {
    if !spec.arms.contains(&Arm::Infusion) {
        return Ok(None);
    }
    let path = spec.prior.as_ref().expect("validated");
    Ok(Some(DenoiserParams::load(path)?.0))
}

/// Run every requested arm on one measurement realization and write
/// `metrics.csv`, `<arm>.cpxa`, `error_<arm>.cpxa`, `trace_<arm>.csv`,
/// `ground_truth.cpxa`, `config.toml` and `run.txt` under the output
/// directory.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let prior = load_prior(spec)?;
    let out = &spec.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), spec.to_toml())?;
    let acq = acquire(spec)?;
    let x = &acq.ground_truth;
    save_array(out.join("ground_truth.cpxa"), x)?;
    let mut resolved = Manifest::default();
    resolved.set("shape", x.shape().iter().map(|s| s.to_string()).collect::<Vec<_>>().join("x"));
    resolved.set("mask.realized_acceleration", acq.mask.realized_acceleration());
    resolved.set("coils", spec.coils.count);
    if let Some(p) = &prior {
        resolved.set("prior.num_params", p.num_params());
    }
    let op = MriOperator::new(acq.maps.clone(), acq.mask.clone())?;
    let problem = ReconProblem::new(acq.kspace.clone(), acq.maps.clone(), acq.mask.clone(), spec.inr.mode)?;
    let mut arms = Vec::new();
    for &arm in &spec.arms {
        let start = Instant::now();
        let (image, peak) = memory::measure_peak(|| -> Result<ComplexArray<f32>> {
            match arm {
                Arm::ZeroFilled => op.adjoint(&acq.kspace),
                Arm::CsWavelet => {
                    let run = |lambda: f64| fista(&op, &acq.kspace, &FistaConfig { lambda, iters: spec.cs.iters, ..Default::default() });
                    let lambda = match spec.cs.lambda {
                        Some(l) => l,
                        None => select_lambda(&lambda_grid(), |l| nrmse(&run(l)?.image, x))?.0,
                    };
                    resolved.set("cs.lambda", lambda);
                    Ok(run(lambda)?.image)
                }
                _ => {
                    let reg = arm.regularizer().expect("INR arm");
                    let cfg = spec.inr.infusion_config(reg, spec.seed);
                    let res = reconstruct(&problem, prior.as_ref(), &cfg)?;
                    resolved.set("inr.num_params", res.state.inr.num_params());
                    write_trace_csv(out.join(format!("trace_{arm}.csv")), &res.state.trace)?;
                    Ok(res.image)
                }
            }
        });
        let image = image?;
        let runtime_s = start.elapsed().as_secs_f64().max(1e-9);
        let metrics = MetricsRow { arm, nrmse: nrmse(&image, x)?, runtime_s, peak_mem_bytes: peak };
        save_array(out.join(format!("{arm}.cpxa")), &image)?;
        save_array(out.join(format!("error_{arm}.cpxa")), &image.sub(x)?)?;
        arms.push(ArmOutput { arm, image, metrics });
    }
    let rows: Vec<MetricsRow> = arms.iter().map(|a| a.metrics.clone()).collect();
    write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    fs::write(out.join("run.txt"), resolved.to_text())?;
    Ok(ExperimentReport { ground_truth: acq.ground_truth, arms, resolved })
}

/// Per-arm NRMSE distributions over a cohort of phantom instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortReport {
    pub arms: Vec<Arm>,
    /// `nrmse[i][a]`: member `i`, arm `arms[a]`.
    pub nrmse: Vec<Vec<f64>>,
}

impl CohortReport {
    pub fn distribution(&self, arm: Arm) -> Option<Vec<f64>> {
        let k = self.arms.iter().position(|&a| a == arm)?;
        Some(self.nrmse.iter().map(|row| row[k]).collect())
    }

    pub fn median(&self, arm: Arm) -> Option<f64> {
        self.distribution(arm).map(|d| median(&d))
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Spec of cohort member `i`: phantom, coil and mask seeds shifted by `i`,
/// output under `member_<i>`.
pub fn cohort_member(spec: &ExperimentSpec, i: usize) -> Result<ExperimentSpec> {
    let mut m = spec.clone();
    let k = i as u64;
    match &mut m.phantom {
        PhantomSpec::SheppLogan { variant_seed, .. } => *variant_seed += k,
        PhantomSpec::File { .. } => return Err(Error::Config("a cohort needs generated phantoms".into())),
    }
    m.coils.seed += k;
    if let MaskSpec::Poisson { seed, .. } = &mut m.mask {
        *seed += k;
    }
    m.seed = spec.seed + k;
    m.output_dir = spec.output_dir.join(format!("member_{i:03}"));
    Ok(m)
}

/// Repeat `run_experiment` over `count` phantom instances and write
/// `cohort.csv` (`member,arm,nrmse`) under the experiment's output directory.
pub fn run_cohort(spec: &ExperimentSpec, count: usize) -> Result<CohortReport> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!("a cohort needs at least 2 members, got {count}")));
    }
    spec.validate()?;
    let members = (0..count).map(|i| cohort_member(spec, i)).collect::<Result<Vec<_>>>()?;
    let mut table = Vec::with_capacity(count);
    for m in &members {
        let rep = run_experiment(m)?;
        table.push(rep.arms.iter().map(|a| a.metrics.nrmse).collect::<Vec<_>>());
    }
    let report = CohortReport { arms: spec.arms.clone(), nrmse: table };
    write_cohort_csv(&spec.output_dir.join("cohort.csv"), &report)?;
    let mut note = Manifest::default();
    note.set("count", count);
    note.set("coils", spec.coils.count);
    note.set("note", "every member uses the same coil count");
    fs::write(spec.output_dir.join("cohort.txt"), note.to_text())?;
    Ok(report)
}

pub fn write_cohort_csv(path: &Path, report: &CohortReport) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "member,arm,nrmse")?;
    for (i, row) in report.nrmse.iter().enumerate() {
        for (arm, v) in report.arms.iter().zip(row) {
            writeln!(out, "{i},{arm},{v}")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_cohort_csv(path: &Path) -> Result<CohortReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut arms: Vec<Arm> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for l in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = l.split(',').collect();
        let bad = || Error::Config(format!("malformed cohort row '{l}'"));
        if f.len() != 3 {
            return Err(bad());
        }
        let i: usize = f[0].parse().map_err(|_| bad())?;
        let arm: Arm = f[1].parse()?;
        let v: f64 = f[2].parse().map_err(|_| bad())?;
        if i == 0 && !arms.contains(&arm) {
            arms.push(arm);
        }
        if rows.len() <= i {
            rows.resize(i + 1, Vec::new());
        }
        rows[i].push(v);
    }
    if rows.iter().any(|r| r.len() != arms.len()) {
        return Err(Error::Config(format!("{} has ragged rows", path.display())));
    }
    Ok(CohortReport { arms, nrmse: rows })
}
