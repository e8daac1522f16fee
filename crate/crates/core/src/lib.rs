//! Latent milestone planning for goal-reaching from offline data.

pub mod calls;
pub mod controller;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod gcil;
pub mod harness;
pub mod maze;
pub mod nn;
pub mod scalar;

pub use calls::CallCounts;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Mlp = nn::Mlp<f64>;
pub type NetParams = nn::NetParams<f64>;
pub type GcilModel = gcil::GcilModel<f64>;
pub type Denoiser = diffusion::Denoiser<f64>;
pub type MilestonePlan = diffusion::MilestonePlan<f64>;
pub type Models = controller::Models<f64>;
