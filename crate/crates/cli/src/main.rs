use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use inr_recon::checkpoint::Manifest;
use inr_recon::container::{load_array, save_array};
use inr_recon::diffusion::{train_denoiser, DenoiserParams, TrainConfig};
use inr_recon::experiment::{run_cohort, run_experiment, simulate_kspace, ExperimentSpec, ReconSpec};
use inr_recon::figures::emit_figures;
use inr_recon::mask::{make_poisson_mask, make_uniform_mask, SamplingMask};
use inr_recon::memory::TrackingAllocator;
use inr_recon::phantom::{make_ensemble, make_phantom, make_phantom_volume, simulate_coil_maps, SensitivityMaps};
use inr_recon::recon::{reconstruct, write_trace_csv, ReconProblem};
use inr_recon::{Error, Measurements, Result};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

/// INR reconstruction of undersampled MRI with a diffusion prior.
///
/// Exit status: 0 on success, 2 on a configuration or input error, 3 on a
/// numerical failure.
#[derive(Parser)]
#[command(name = "inr-recon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom image or volume, coil maps and (optionally) k-space.
    Phantom(PhantomArgs),
    /// Generate a k-space sampling mask.
    Mask(MaskArgs),
    /// Train a denoising prior on a generated phantom ensemble.
    TrainPrior(TrainArgs),
    /// Reconstruct an image from stored k-space, coil maps and mask.
    Recon(ReconArgs),
    /// Run an experiment over several phantom instances.
    Cohort(CohortArgs),
    /// Run every arm of one experiment.
    Eval(EvalArgs),
    /// Render figures for a finished run directory.
    Figures(FiguresArgs),
}

#[derive(Parser)]
struct PhantomArgs {
    /// Image rows.
    #[arg(long, default_value_t = 64)]
    nx: usize,
    /// Image columns.
    #[arg(long, default_value_t = 64)]
    ny: usize,
    /// Slices; omit for a 2D image.
    #[arg(long)]
    nz: Option<usize>,
    /// Seed of the random ellipse perturbation.
    #[arg(long, default_value_t = 0)]
    variant_seed: u64,
    /// Number of receive coils.
    #[arg(long, default_value_t = 4)]
    coils: usize,
    /// Seed of the coil-map simulation.
    #[arg(long, default_value_t = 0)]
    coil_seed: u64,
    /// Mask file (CPXA); when given, undersampled k-space is written too.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Standard deviation of the k-space noise per real component.
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    /// Seed of the k-space noise.
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// Output directory for image.cpxa, maps.cpxa and kspace.cpxa.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskKind {
    Poisson,
    Uniform,
    Full,
}

#[derive(Parser)]
struct MaskArgs {
    /// Mask family.
    #[arg(long, value_enum, default_value_t = MaskKind::Poisson)]
    kind: MaskKind,
    /// Phase-encode rows (ky).
    #[arg(long, default_value_t = 64)]
    rows: usize,
    /// Phase-encode columns (kx for 2D images, kz for volumes).
    #[arg(long, default_value_t = 64)]
    cols: usize,
    /// Target acceleration of a Poisson mask.
    #[arg(long, default_value_t = 4.0)]
    acceleration: f64,
    /// Side of the fully sampled calibration square of a Poisson mask.
    #[arg(long, default_value_t = 16)]
    calib: usize,
    /// Seed of a Poisson mask.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Row stride of a uniform mask.
    #[arg(long, default_value_t = 2)]
    ry: usize,
    /// Column stride of a uniform mask.
    #[arg(long, default_value_t = 1)]
    rz: usize,
    /// Output file (CPXA, 1 = sampled).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Parser)]
struct TrainArgs {
    /// Number of phantom variants in the training ensemble.
    #[arg(long, default_value_t = 256)]
    count: usize,
    /// Side of the square training images (a power of two).
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Seed of the training ensemble.
    #[arg(long, default_value_t = 1000)]
    ensemble_seed: u64,
    /// Base channel width of the U-Net.
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Optimizer steps.
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Images per step.
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Train on random square crops of this side (a multiple of 4).
    #[arg(long)]
    crop: Option<usize>,
    /// Seed of initialization, batching and noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint directory; losses.csv is written alongside.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Parser)]
struct ReconArgs {
    /// Coil-major k-space stack (CPXA).
    #[arg(long)]
    kspace: PathBuf,
    /// Coil-major sensitivity maps (CPXA).
    #[arg(long)]
    maps: PathBuf,
    /// Sampling mask (CPXA).
    #[arg(long)]
    mask: PathBuf,
    /// Reconstruction settings (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Denoiser checkpoint directory, required by the diffusion regularizer.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Override the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for image.cpxa, trace.csv, config.toml and inr/.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Parser)]
struct CohortArgs {
    /// Experiment spec (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Number of phantom instances (at least 2).
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Render figures after the run.
    #[arg(long)]
    figures: bool,
}

#[derive(Parser)]
struct EvalArgs {
    /// Experiment spec (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Render figures after the run.
    #[arg(long)]
    figures: bool,
}

#[derive(Parser)]
struct FiguresArgs {
    /// Run directory written by `eval` or `cohort`.
    #[arg(long)]
    run: PathBuf,
}

fn phantom(a: &PhantomArgs) -> Result<()> {
    let x = match a.nz {
        Some(nz) => make_phantom_volume::<f32>(a.nx, a.ny, nz, a.variant_seed)?,
        None => make_phantom::<f32>(a.nx, a.ny, a.variant_seed)?,
    };
    let maps2 = simulate_coil_maps::<f32>(a.nx, a.ny, a.coils, a.coil_seed)?;
    let maps = match a.nz {
        Some(nz) => maps2.extrude(nz)?,
        None => maps2,
    };
    fs::create_dir_all(&a.out)?;
    save_array(a.out.join("image.cpxa"), &x)?;
    save_array(a.out.join("maps.cpxa"), &maps.to_array())?;
    if let Some(path) = &a.mask {
        let mask = read_mask(path)?;
        let y = simulate_kspace(&x, &maps, &mask, a.noise_std, a.noise_seed)?;
        save_array(a.out.join("kspace.cpxa"), &y.to_array())?;
    }
    Ok(())
}

fn read_mask(path: &Path) -> Result<SamplingMask> {
    let a = load_array(path)?;
    let kept = a.data().iter().filter(|v| v.re > 0.5).count().max(1);
    SamplingMask::from_array(&a, a.len() as f64 / kept as f64)
}

fn mask(a: &MaskArgs) -> Result<()> {
    let m = match a.kind {
        MaskKind::Poisson => make_poisson_mask(a.rows, a.cols, a.acceleration, a.calib, a.seed)?,
        MaskKind::Uniform => make_uniform_mask(a.rows, a.cols, a.ry, a.rz)?,
        MaskKind::Full => SamplingMask::full([a.rows, a.cols]),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_array(&a.out, &m.to_array::<f32>())?;
    eprintln!("realized acceleration {:.3}", m.realized_acceleration());
    Ok(())
}

fn train_prior(a: &TrainArgs) -> Result<()> {
    let ens = make_ensemble::<f32>(a.count, a.size, a.size, a.ensemble_seed)?;
    let cfg = TrainConfig { width: a.width, steps: a.steps, batch: a.batch, lr: a.lr, crop: a.crop, ..Default::default() };
    let out = train_denoiser(&ens, &cfg, a.seed)?;
    let mut extra = Manifest::default();
    extra.set("train.count", a.count);
    extra.set("train.size", a.size);
    extra.set("train.ensemble_seed", a.ensemble_seed);
    extra.set("train.steps", a.steps);
    extra.set("train.batch", a.batch);
    extra.set("train.lr", a.lr);
    extra.set("train.seed", a.seed);
    out.params.save(&a.out, &extra)?;
    let mut f = std::io::BufWriter::new(fs::File::create(a.out.join("losses.csv"))?);
    writeln!(f, "step,loss")?;
    for (i, l) in out.losses.iter().enumerate() {
        writeln!(f, "{i},{l}")?;
    }
    f.flush()?;
    Ok(())
}

fn recon(a: &ReconArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            ReconSpec::from_toml(&text)?
        }
        None => ReconSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let cfg = spec.config()?;
    let prior = match &a.prior {
        Some(p) => Some(DenoiserParams::<f32>::load(p)?.0),
        None => None,
    };
    let mask = read_mask(&a.mask)?;
    let maps = SensitivityMaps::from_array(&load_array(&a.maps)?)?;
    let y = Measurements::from_array(&load_array(&a.kspace)?, mask.clone())?;
    let problem = ReconProblem::new(y, maps, mask, cfg.mode)?;
    let out = reconstruct(&problem, prior.as_ref(), &cfg)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), spec.to_toml())?;
    save_array(a.out.join("image.cpxa"), &out.image)?;
    write_trace_csv(a.out.join("trace.csv"), &out.state.trace)?;
    out.state.inr.save(&a.out.join("inr"))?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let spec = ExperimentSpec::from_file(&a.config)?;
    let report = run_experiment(&spec)?;
    for r in report.rows() {
        println!("{:<12} nrmse {:.4}  {:.1}s", r.arm.name(), r.nrmse, r.runtime_s);
    }
    if a.figures {
        emit_figures(&spec.output_dir)?;
    }
    Ok(())
}

fn cohort(a: &CohortArgs) -> Result<()> {
    let spec = ExperimentSpec::from_file(&a.config)?;
    let report = run_cohort(&spec, a.count)?;
    for &arm in &report.arms {
        println!("{:<12} median nrmse {:.4}", arm.name(), report.median(arm).unwrap_or(f64::NAN));
    }
    if a.figures {
        emit_figures(&spec.output_dir)?;
        for i in 0..a.count {
            emit_figures(&spec.output_dir.join(format!("member_{i:03}")))?;
        }
    }
    Ok(())
}

fn figures(a: &FiguresArgs) -> Result<()> {
    for p in emit_figures(&a.run)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericalFailure(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Mask(a) => mask(a),
        Command::TrainPrior(a) => train_prior(a),
        Command::Recon(a) => recon(a),
        Command::Cohort(a) => cohort(a),
        Command::Eval(a) => eval(a),
        Command::Figures(a) => figures(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
