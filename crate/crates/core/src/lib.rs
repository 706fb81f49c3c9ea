pub mod array;
pub mod checkpoint;
pub mod container;
pub mod cs;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod fft;
pub mod figures;
pub mod inr;
pub mod mask;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod operator;
pub mod optim;
pub mod perceptual;
pub mod phantom;
pub mod recon;
pub mod rng;
pub mod scalar;
pub mod wavelet;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ComplexImage = array::ComplexArray<f32>;
pub type ComplexImage64 = array::ComplexArray<f64>;
pub type Operator = operator::MriOperator<f32>;
pub type Operator64 = operator::MriOperator<f64>;
pub type Measurements = operator::KSpaceMeasurements<f32>;
pub type Measurements64 = operator::KSpaceMeasurements<f64>;
pub type CoilMaps = phantom::SensitivityMaps<f32>;
pub type CoilMaps64 = phantom::SensitivityMaps<f64>;
pub type Inr = inr::InrParams<f32>;
pub type Inr64 = inr::InrParams<f64>;
pub type Denoiser = diffusion::DenoiserParams<f32>;
pub type Denoiser64 = diffusion::DenoiserParams<f64>;
pub type Problem = recon::ReconProblem<f32>;
pub type Problem64 = recon::ReconProblem<f64>;
