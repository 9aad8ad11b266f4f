//! Watermarking of diffusion-model adapters with a dedicated key adapter.
//!
//! The crate is a miniature, fully inspectable latent-diffusion stack: a
//! linear latent codec over small RGB images, a Gaussian-mixture world, an
//! MLP noise predictor, and the watermark machinery built on top of it.
//!
//! * [`stage1`] trains a message encoder and a private decoder in latent space.
//! * [`stage2`] trains a key adapter whose samples carry the encoder's residual,
//!   with the watermark gradient projected away from the semantic gradient.
//! * [`lora`] superposes the key adapter with any style adapter, no retraining.
//! * [`verify`] turns decoded bits into an ownership decision with an exact
//!   false-positive bound, and [`attacks`] measures how that decision survives
//!   image and parameter edits.

pub mod attacks;
pub mod container;
pub mod diffusion;
pub mod error;
pub mod lora;
pub mod numerics;
pub mod pipeline;
pub mod ppm;
pub mod stage1;
pub mod stage2;
pub mod verify;
pub mod world;

pub use error::{Error, Result};
