use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Policy;
use crate::autodiff::{Tape, Var};
use crate::empowerment::{EmpowermentEstimator, MiNoise};
use crate::envs::{Dynamics, StepContext};
use crate::error::{Error, Result};
use crate::networks::{Activation, Binding, LayerSpec};
use crate::rng::standard_normal;

/// Linear ramp of β over `epochs`, constant at `end` afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub epochs: usize,
}

impl BetaSchedule {
    pub fn constant(beta: f64) -> Self {
        Self {
            start: beta,
            end: beta,
            epochs: 1,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.end;
        }
        let f = (epoch as f64 / (self.epochs - 1) as f64).min(1.0);
        self.start + (self.end - self.start) * f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// θ and χ step on the gradient of one shared batch.
    Joint,
    /// θ steps on one batch, then χ on a freshly sampled one.
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// States per rollout, T.
    pub horizon: usize,
    /// Rollouts per epoch, M.
    pub rollouts: usize,
    pub beta: BetaSchedule,
    pub epochs: usize,
    pub learning_rate_theta: f64,
    pub learning_rate_chi: f64,
    /// Order of the empowerment estimate accumulated along rollouts.
    pub n_steps: usize,
    pub update: UpdateMode,
    pub policy_hidden: Vec<LayerSpec>,
    /// Extra states per epoch drawn from the coverage sampler; they train θ only.
    pub coverage_states: usize,
    #[serde(with = "crate::networks::clip_norm")]
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            rollouts: 32,
            beta: BetaSchedule {
                start: 5.0,
                end: 2000.0,
                epochs: 800,
            },
            epochs: 800,
            learning_rate_theta: 1e-3,
            learning_rate_chi: 1e-3,
            n_steps: 1,
            update: UpdateMode::Joint,
            policy_hidden: vec![LayerSpec {
                width: 128,
                activation: Activation::Tanh,
            }],
            coverage_states: 0,
            max_grad_norm: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.rollouts == 0 {
            return Err(Error::Config("horizon T and rollout count M must be ≥ 1".into()));
        }
        if !(self.beta.start >= 0.0 && self.beta.end >= 0.0 && self.beta.end.is_finite()) {
            return Err(Error::Config(format!("β schedule values must be finite and non-negative, got {:?}", self.beta)));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be ≥ 1".into()));
        }
        if !(self.learning_rate_theta >= 0.0 && self.learning_rate_chi >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Standard-normal draws for one batch of M rollouts of horizon T.
#[derive(Debug, Clone)]
pub struct RolloutNoise {
    pub rollouts: usize,
    /// `T − 1` blocks of `[M, d_a]`.
    pub policy: Vec<Vec<f64>>,
    /// `T − 1` blocks of `[M, noise_dim]`.
    pub transition: Vec<Vec<f64>>,
    /// One estimator draw per visited state.
    pub estimator: Vec<MiNoise>,
}

impl RolloutNoise {
    pub fn sample(
        rng: &mut impl Rng,
        est: &EmpowermentEstimator,
        dynamics: &dyn Dynamics,
        rollouts: usize,
        horizon: usize,
    ) -> Self {
        let steps = horizon.saturating_sub(1);
        Self {
            rollouts,
            policy: (0..steps)
                .map(|_| standard_normal(rng, rollouts * dynamics.action_dim()))
                .collect(),
            transition: (0..steps)
                .map(|_| standard_normal(rng, rollouts * dynamics.noise_dim()))
                .collect(),
            estimator: (0..horizon).map(|_| est.sample_noise(rng, rollouts)).collect(),
        }
    }

    /// All-zero draws: mean policy actions and noise-free transitions.
    pub fn zeros(est: &EmpowermentEstimator, dynamics: &dyn Dynamics, rollouts: usize, horizon: usize) -> Self {
        let steps = horizon.saturating_sub(1);
        let n = est.n_steps();
        Self {
            rollouts,
            policy: vec![vec![0.0; rollouts * dynamics.action_dim()]; steps],
            transition: vec![vec![0.0; rollouts * dynamics.noise_dim()]; steps],
            estimator: (0..horizon)
                .map(|_| MiNoise {
                    batch: rollouts,
                    action: vec![0.0; rollouts * n * dynamics.action_dim()],
                    transition: vec![vec![0.0; rollouts * dynamics.noise_dim()]; n],
                })
                .collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.estimator.len()
    }
}

/// M differentiable trajectories, time-major.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// `T` tensors `[M, d_s]`.
    pub states: Vec<Var>,
    /// `T − 1` applied actions `[M, d_a]`.
    pub actions: Vec<Var>,
    /// `T` per-rollout bound samples `[M]`.
    pub mi: Vec<Var>,
    /// `T − 1` per-rollout KL(π(·|s_t) ‖ π₀) `[M]`.
    pub kl: Vec<Var>,
}

/// Rolls π through `dynamics` from `initial` (`[M, d_s]`) and evaluates the
/// bound at every visited state. Gradients reach χ through the actions and
/// all later states, and θ through the bound samples.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    tape: &mut Tape,
    policy: &Policy,
    chi: &Binding,
    est: &EmpowermentEstimator,
    theta: &Binding,
    dynamics: &dyn Dynamics,
    ctx: &StepContext,
    initial: Var,
    noise: &RolloutNoise,
) -> Result<Rollout> {
    let m = tape.shape(initial)[0];
    let horizon = noise.horizon();
    if horizon == 0 || noise.rollouts != m || noise.policy.len() + 1 != horizon || noise.transition.len() + 1 != horizon {
        return Err(Error::Validation(format!(
            "rollout noise does not match {m} rollouts of horizon {horizon}"
        )));
    }
    let da = dynamics.action_dim();
    let dn = dynamics.noise_dim();
    let mut out = Rollout {
        states: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon - 1),
        mi: Vec::with_capacity(horizon),
        kl: Vec::with_capacity(horizon - 1),
    };
    let mut s = initial;
    for t in 0..horizon {
        out.states.push(s);
        out.mi.push(est.bound_samples(tape, theta, dynamics, ctx, s, &noise.estimator[t])?);
        if t + 1 == horizon {
            break;
        }
        let pi = policy.distribution(tape, chi, dynamics, s)?;
        out.kl.push(pi.kl_to_standard_normal(tape)?);
        let eps = tape.constant(noise.policy[t].clone(), &[m, da])?;
        let pre = pi.rsample(tape, eps)?;
        let a = policy.to_action(tape, pre)?;
        out.actions.push(a);
        let eps_s = tape.constant(noise.transition[t].clone(), &[m, dn])?;
        s = dynamics.step(tape, ctx, s, a, eps_s)?;
    }
    Ok(out)
}

/// Scalar parts of the policy objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    /// `β Σ_m Σ_t Î − Σ_m Σ_t KL`, maximized jointly in θ and χ.
    pub value: Var,
    pub mi_sum: Var,
    pub kl_sum: Var,
}

fn total(tape: &mut Tape, parts: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &p in parts {
        let s = tape.sum(p);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(acc)
}

pub fn objective(tape: &mut Tape, rollout: &Rollout, beta: f64) -> Result<Objective> {
    let mi_sum = total(tape, &rollout.mi)?.ok_or_else(|| Error::Validation("empty rollout".into()))?;
    let kl_sum = match total(tape, &rollout.kl)? {
        Some(k) => k,
        None => tape.scalar(0.0),
    };
    let weighted = tape.scale(mi_sum, beta);
    let value = tape.sub(weighted, kl_sum)?;
    Ok(Objective { value, mi_sum, kl_sum })
}
