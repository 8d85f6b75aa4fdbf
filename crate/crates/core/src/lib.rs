pub mod data;
pub mod diffusion;
pub mod error;
pub mod fidelity;
pub mod kmeans;
pub mod nn;
pub mod pipeline;
pub mod privacy;
pub mod scalar;
pub mod structure;
pub mod tensor;
pub mod toy;
pub mod training;
pub mod utility;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Schedule32 = diffusion::NoiseSchedule<f32>;
pub type Schedule64 = diffusion::NoiseSchedule<f64>;
pub type Denoiser32 = nn::Denoiser<f32>;
pub type Denoiser64 = nn::Denoiser<f64>;
pub type EpisodeBatch32 = data::EpisodeBatch<f32>;
pub type EpisodeBatch64 = data::EpisodeBatch<f64>;
