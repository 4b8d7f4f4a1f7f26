//! Empowerment-maximizing policies trained through differentiable rollouts.
//!
//! Along `M` rollouts of `T` states the policy π collects the empowerment
//! bound Î at every visited state and pays KL(π ‖ N(0, I)) for every action.
//! The objective `β ΣΣ Î − ΣΣ KL` is maximized jointly in the estimator
//! parameters θ and the policy parameters χ.

mod eval;
mod landscape;
mod net;
mod rollout;
mod train;

pub use eval::{evaluate_policy, Controller, EvalConfig, EvalReport, Histogram2d, LatencyStats};
pub use landscape::accumulated_landscape;
pub use net::Policy;
pub use rollout::{objective, rollout, BetaSchedule, Objective, Rollout, RolloutNoise, TrainingConfig, UpdateMode};
pub use train::{train_policy, write_policy_log, PolicyTrainRecord, StateSampler};
