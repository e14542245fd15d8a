//! Desk-scale multi-layer virtual try-on.
//!
//! Occlusion-aware garment layering on top of a small reverse-mode tensor
//! engine: an occlusion-attention network refines the inner-garment latent,
//! a latent diffusion denoiser fits both garments onto the person, and the
//! layered coherence metric scores results region by region.

pub mod checkpoint;
pub mod codec;
pub mod config;
mod conv;
pub mod dataset;
pub mod error;
pub mod gmf;
pub mod gol;
pub mod gradcheck;
pub mod graph;
pub mod image_io;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod param;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod unet;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use param::{ParamStore, Parameter};
pub use tensor::Tensor;
