//! Latent state-space model learned from observation/control sequences.
//!
//! The recognition model fuses a transition-based Gaussian with a
//! measurement-based Gaussian in closed form. Latent samples are written as
//! `z_t = μ_trans + σ_trans ⊙ w_t`, with the innovation `w_t` penalized by a KL
//! to a standard normal. The first latent state comes from a small
//! variational autoencoder over the first K observations.

mod latent;
mod model;
mod train;

pub use latent::LatentDynamics;
pub use model::{
    fuse, fuse_values, innovation_noise, innovation_noise_values, DvbfConfig, DvbfModel, ElboNoise, ElboParts, LatentBelief,
    SequenceBatch,
};
pub use train::{one_step_rmse, train_dynamics, write_dynamics_log, DvbfTrainConfig, DvbfTrainRecord};
