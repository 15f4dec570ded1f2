//! Prior-guided latent diffusion for low-light image enhancement.
//!
//! Generic code is parameterised over [`gpp_tensor::Scalar`]; training runs in
//! f32 and gradient checks in f64. Aliases below fix the common choices.

pub mod autoencoder;
pub mod checks;
mod container;
pub mod diffusion;
pub mod error;
pub mod imaging;
pub mod net;
pub mod optim;
pub mod params;
pub mod priors;
pub mod trainer;

pub use error::{CoreError, Result};

pub type GppNet32 = net::GppNet<f32>;
pub type GppNet64 = net::GppNet<f64>;
pub type Autoencoder32 = autoencoder::Autoencoder<f32>;
pub type Autoencoder64 = autoencoder::Autoencoder<f64>;
pub type ParamSet32 = params::ParamSet<f32>;
pub type ParamSet64 = params::ParamSet<f64>;
