//! Experiment definitions and the steps that turn them into datasets,
//! models, landscapes and evaluation reports.

mod config;
mod manifest;
mod pipeline;

pub use config::{DataConfig, DynamicsMode, ExperimentConfig, LandscapeConfig, LandscapeMode, Profile, PRESETS};
pub use manifest::{file_digest, Manifest};
pub use pipeline::{
    compute_landscape, evaluate, fit_dynamics, generate_data, init_agent, overlay_trajectory, simulator, train_agent,
    write_trajectory_csv, Agent, Simulator, TrainingLogs,
};
