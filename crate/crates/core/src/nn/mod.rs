//! The U-Net noise predictor and the small differentiation engine behind it.

mod params;
mod tape;
mod unet;

pub use params::{write_atomic, Gradients, ParamStore};
pub use unet::{sinusoidal_embed, Denoiser, DenoiserConfig, ForwardPass, Init};
