//! Differentiable analytic environments and the trajectory dataset format.
//!
//! Every step is a deterministic function of `(state, action, noise)`; all
//! randomness enters through the explicit noise tensor so that rollouts can be
//! reparametrized.

mod ball;
mod dataset;
mod linear;
mod pendulum;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use ball::{Ball, BallConfig};
pub use dataset::{generate_dataset, Dataset, Episode};
pub use linear::{LinearGaussian, LinearGaussianConfig};
pub use pendulum::{wrap_angle, Pendulum, PendulumConfig};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::networks::Binding;
use crate::rng::standard_normal;

/// Per-tape state a [`Dynamics`] implementation needs while stepping, such as
/// bound network weights of a learned model.
#[derive(Debug, Clone, Default)]
pub struct StepContext {
    pub binding: Option<Binding>,
}

/// A reparametrizable transition `s' = f(s, a, ε)` on batched `[B, d]` tensors.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn noise_dim(&self) -> usize {
        self.state_dim()
    }
    /// Per-dimension bound applied by tanh squashing; `None` leaves actions unsquashed.
    fn action_bound(&self) -> Option<&[f64]>;
    fn prepare(&self, _tape: &mut Tape) -> Result<StepContext> {
        Ok(StepContext::default())
    }
    fn step(&self, tape: &mut Tape, ctx: &StepContext, state: Var, action: Var, noise: Var) -> Result<Var>;
    /// Network input encoding of a batch of states.
    fn features(&self, _tape: &mut Tape, state: Var) -> Result<Var> {
        Ok(state)
    }
    fn feature_dim(&self) -> usize {
        self.state_dim()
    }
    /// Typical per-dimension magnitude of a one-step state change.
    fn delta_scale(&self) -> Vec<f64> {
        vec![1.0; self.state_dim()]
    }
    fn as_linear_gaussian(&self) -> Option<&LinearGaussian> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Pendulum,
    Ball,
    LinearGaussian,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::Ball => "ball",
            EnvKind::LinearGaussian => "linear_gaussian",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub u_max: Option<Vec<f64>>,
    pub dt: Option<f64>,
    pub noise_std: Vec<f64>,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(u) = &self.u_max {
            if u.len() != self.action_dim || u.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Validation(format!("u_max must be {} positive values, got {u:?}", self.action_dim)));
            }
        }
        if self.noise_std.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Validation(format!("noise std must be ≥ 0, got {:?}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Pendulum(PendulumConfig),
    Ball(BallConfig),
    LinearGaussian(LinearGaussianConfig),
}

impl EnvConfig {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvConfig::Pendulum(_) => EnvKind::Pendulum,
            EnvConfig::Ball(_) => EnvKind::Ball,
            EnvConfig::LinearGaussian(_) => EnvKind::LinearGaussian,
        }
    }

    pub fn build(&self) -> Result<Env> {
        let env = match self {
            EnvConfig::Pendulum(c) => Env::Pendulum(Pendulum::new(c.clone())?),
            EnvConfig::Ball(c) => Env::Ball(Ball::new(c.clone())?),
            EnvConfig::LinearGaussian(c) => Env::LinearGaussian(LinearGaussian::new(c.clone())?),
        };
        env.spec().validate()?;
        Ok(env)
    }
}

/// One of the analytic environments, usable both on a tape and with plain values.
#[derive(Debug, Clone)]
pub enum Env {
    Pendulum(Pendulum),
    Ball(Ball),
    LinearGaussian(LinearGaussian),
}

impl Env {
    pub fn dynamics(&self) -> &dyn Dynamics {
        match self {
            Env::Pendulum(e) => e,
            Env::Ball(e) => e,
            Env::LinearGaussian(e) => e,
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            Env::Pendulum(_) => EnvKind::Pendulum,
            Env::Ball(_) => EnvKind::Ball,
            Env::LinearGaussian(_) => EnvKind::LinearGaussian,
        }
    }

    pub fn spec(&self) -> EnvSpec {
        match self {
            Env::Pendulum(e) => e.spec(),
            Env::Ball(e) => e.spec(),
            Env::LinearGaussian(e) => e.spec(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics().state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.dynamics().action_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.spec().obs_dim
    }

    /// Draws an initial state from the reset distribution.
    pub fn reset(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Env::Pendulum(e) => e.reset(rng),
            Env::Ball(e) => e.reset(rng),
            Env::LinearGaussian(e) => vec![0.0; e.state_dim()],
        }
    }

    /// Plain-value transition with the same semantics as the tape version.
    pub fn step_values(&self, state: &[f64], action: &[f64], noise: &[f64]) -> Vec<f64> {
        match self {
            Env::Pendulum(e) => e.step_values(state, action, noise),
            Env::Ball(e) => e.step_values(state, action, noise),
            Env::LinearGaussian(e) => e.step_values(state, action, noise),
        }
    }

    pub fn sample_noise(&self, rng: &mut impl Rng) -> Vec<f64> {
        standard_normal(rng, self.dynamics().noise_dim())
    }

    /// Noise-free observation of `state`.
    pub fn observation(&self, state: &[f64]) -> Vec<f64> {
        match self {
            Env::Pendulum(_) => vec![wrap_angle(state[0]), state[1]],
            Env::Ball(_) | Env::LinearGaussian(_) => state.to_vec(),
        }
    }

    /// Observation emitted for `state`, with optional observation noise.
    pub fn observe(&self, state: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let mut obs = self.observation(state);
        let std = match self {
            Env::Pendulum(e) => e.config().obs_noise_std,
            Env::Ball(e) => e.config().obs_noise_std,
            Env::LinearGaussian(_) => 0.0,
        };
        if std > 0.0 {
            for (o, n) in obs.iter_mut().zip(standard_normal(rng, state.len())) {
                *o += std * n;
            }
        }
        obs
    }

    /// Inverse of [`observe`](Self::observe) without noise, used to seed grid states.
    pub fn state_from_observation(&self, obs: &[f64]) -> Vec<f64> {
        obs.to_vec()
    }

    /// Interpretable coordinate ranges for landscape grids.
    pub fn grid_bounds(&self) -> Vec<(f64, f64)> {
        match self {
            Env::Pendulum(e) => vec![(-std::f64::consts::PI, std::f64::consts::PI), (-e.config().max_speed, e.config().max_speed)],
            Env::Ball(e) => {
                let h = e.half_side();
                vec![(-h, h); 2]
            }
            Env::LinearGaussian(e) => vec![(-10.0, 10.0); e.state_dim()],
        }
    }

    /// Uniform random action within the bound (±1 for unbounded channels).
    pub fn uniform_action(&self, rng: &mut impl Rng) -> Vec<f64> {
        let d = self.action_dim();
        let bound = self.dynamics().action_bound().map(|b| b.to_vec()).unwrap_or_else(|| vec![1.0; d]);
        bound.iter().map(|&u| rng.random_range(-u..=u)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;

    fn envs() -> Vec<Env> {
        vec![
            EnvConfig::Pendulum(PendulumConfig::default()).build().unwrap(),
            EnvConfig::Ball(BallConfig::default()).build().unwrap(),
            EnvConfig::LinearGaussian(LinearGaussianConfig {
                dim: 2,
                ..Default::default()
            })
            .build()
            .unwrap(),
        ]
    }

    fn tape_step(env: &Env, s: &[f64], a: &[f64], n: &[f64]) -> Vec<f64> {
        let dynamics = env.dynamics();
        let mut t = Tape::new();
        let ctx = dynamics.prepare(&mut t).unwrap();
        let sv = t.constant(s.to_vec(), &[1, s.len()]).unwrap();
        let av = t.constant(a.to_vec(), &[1, a.len()]).unwrap();
        let nv = t.constant(n.to_vec(), &[1, n.len()]).unwrap();
        let out = dynamics.step(&mut t, &ctx, sv, av, nv).unwrap();
        t.value(out).to_vec()
    }

    proptest! {
        #[test]
        fn tape_and_plain_steps_agree(seed in 0u64..500) {
            let mut rng = stream_rng(seed, Stream::Data);
            for env in envs() {
                let s = env.reset(&mut rng);
                let a = env.uniform_action(&mut rng);
                let n = env.sample_noise(&mut rng);
                let plain = env.step_values(&s, &a, &n);
                let taped = tape_step(&env, &s, &a, &n);
                for (x, y) in plain.iter().zip(&taped) {
                    prop_assert!((x - y).abs() < 1e-12, "{:?}: {plain:?} vs {taped:?}", env.kind());
                }
            }
        }

        #[test]
        fn steps_stay_in_bounds(seed in 0u64..500, steps in 1usize..60) {
            let mut rng = stream_rng(seed, Stream::Rollout);
            for env in envs().into_iter().take(2) {
                let mut s = env.reset(&mut rng);
                for _ in 0..steps {
                    let a: Vec<f64> = env.uniform_action(&mut rng).iter().map(|u| 3.0 * u).collect();
                    let n: Vec<f64> = env.sample_noise(&mut rng).iter().map(|v| 50.0 * v).collect();
                    s = env.step_values(&s, &a, &n);
                    match &env {
                        Env::Pendulum(_) => prop_assert!(s[1].abs() <= 8.0),
                        Env::Ball(b) => prop_assert!(s.iter().all(|p| p.abs() <= b.half_side())),
                        Env::LinearGaussian(_) => {}
                    }
                }
            }
        }
    }

    #[test]
    fn interior_steps_pass_gradcheck() {
        // state, action and noise concatenated into one vector
        let cases: Vec<(Env, Vec<f64>)> = vec![
            (envs()[0].clone(), vec![0.4, -1.3, 0.7, 0.2, -0.5]),
            (envs()[1].clone(), vec![1.0, -2.0, 0.2, -0.3, 0.4, 0.1]),
            (envs()[2].clone(), vec![1.0, -2.0, 0.2, -0.3, 0.4, 0.1]),
        ];
        for (env, x) in cases {
            let ds = env.state_dim();
            let da = env.action_dim();
            let err = finite_difference_check(
                |t: &mut Tape, v: Var| -> Result<Var> {
                    let d = env.dynamics();
                    let ctx = d.prepare(t)?;
                    let s = t.slice(v, 0, ds)?;
                    let s = t.reshape(s, &[1, ds])?;
                    let a = t.slice(v, ds, da)?;
                    let a = t.reshape(a, &[1, da])?;
                    let n = t.slice(v, ds + da, ds)?;
                    let n = t.reshape(n, &[1, ds])?;
                    let out = d.step(t, &ctx, s, a, n)?;
                    let w = t.constant((1..=ds).map(|i| i as f64 * 0.7).collect(), &[ds])?;
                    let y = t.mul(out, w)?;
                    Ok(t.sum(y))
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{:?}: {err}", env.kind());
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = envs()[1].spec();
        assert!(spec.validate().is_ok());
        spec.u_max = Some(vec![0.5, 0.0]);
        assert!(spec.validate().is_err());
        let mut spec = envs()[0].spec();
        spec.noise_std = vec![-0.1, 0.0];
        assert!(spec.validate().is_err());
    }
}
