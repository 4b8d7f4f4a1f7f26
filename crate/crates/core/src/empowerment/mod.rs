//! Variational lower bound on empowerment.
//!
//! A source ω(a|s) proposes actions, the dynamics produce the successor, and
//! a planner q(a|s',s) tries to recover the action. The sample
//! `ln q(a|s',s) − ln ω(a|s)` is an unbiased estimate of a lower bound on the
//! mutual information between action and successor; maximizing it jointly in
//! the parameters of ω and q tightens the bound and approaches the channel
//! capacity. For `n ≥ 2` the source emits a whole open-loop action sequence
//! and the planner is a chain `q(a₀|s_n,s) Π q(a_{k+1}|s_n,a_k,s)`.

mod estimator;
mod landscape;
mod oracle;
mod train;

pub use estimator::{
    EmpowermentEstimator, Estimate, EstimatorConfig, GapEstimate, MiNoise, SourceConfig,
};
pub use landscape::{empowerment_landscape, GridSpec, Landscape, LandscapeCell};
pub use oracle::{additive_channel_matrix, discrete_mi_oracle, CapacityResult};
pub use train::{train_source_planner, write_source_log, SourceTrainConfig, SourceTrainRecord};
