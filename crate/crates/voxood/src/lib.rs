//! Unsupervised out-of-distribution detection for 3D volumes.
//!
//! The pipeline compresses volumes with a vector-quantized convolutional
//! autoencoder, reconstructs the latent from multiple noise levels with a
//! diffusion model, and scores OOD-ness by z-normalized reconstruction
//! similarity, with per-voxel anomaly maps and a statistical evaluation
//! harness (ROC AUC plus paired DeLong tests).

pub mod config;
pub mod corrupt;
pub mod diffusion;
pub mod nn;
pub mod pipeline;
pub mod vqvae;
pub mod error;
pub mod manifest;
pub mod scoring;
pub mod seeding;
pub mod ssim;
pub mod stats;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
