//! Boundary-sketch-conditioned generation of steady-state electromagnetic
//! fields.
//!
//! The crate couples a 2D FDTD oracle that renders ground-truth field
//! snapshots from source sketches with a latent diffusion transformer that
//! learns the direct sketch-to-field mapping. Everything runs on the CPU with
//! deterministic seeding: the tensor engine, the Yee solver, the dataset
//! pipeline, training, DDIM sampling, and the evaluation metrics.
//!
//! Module map:
//! - [`tensor`]: dense arrays, reverse-mode autodiff, AdamW, gradient checks
//! - [`fdtd`]: TE-polarization Yee solver with graded absorbing layers
//! - [`boundary`]: sketches, Canny edges, condition tensors, dataset format
//! - [`vae`]: field-image autoencoder at 8x spatial compression
//! - [`prior`]: conditional prior latents and the blending schedule
//! - [`dit`]: the diffusion transformer with neighborhood attention and
//!   cross-attention boundary injection
//! - [`diffusion`]: noise schedule, losses, guidance, DDIM sampling
//! - [`metrics`]: SSIM / MSE / PSNR / edge fidelity / boundary accuracy
//! - [`train`]: run configuration, checkpoints, the training loop

pub mod boundary;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod fdtd;
pub mod metrics;
pub mod params;
pub mod prior;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::FieldgenError;
pub use tensor::{Tape, Tensor};
