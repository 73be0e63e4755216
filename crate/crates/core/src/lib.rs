//! Text-conditioned diffusion denoising of raw Bayer sensor images.
//!
//! The crate covers the whole workflow: a heteroscedastic sensor noise
//! model, a forward/inverse ISP, a DDPM with an x0-predicting conditional
//! U-Net trained under L1 loss, low-rank adapters for fine-tuning on real
//! captures, and PSNR/SSIM evaluation. Everything runs on a small
//! reverse-mode tensor engine in [`tensor`].

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod lora;
pub mod metrics;
pub mod noise;
pub mod optim;
pub mod raw;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
