use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dynamics, EnvKind, EnvSpec, StepContext};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumConfig {
    pub g: f64,
    pub m: f64,
    pub l: f64,
    pub dt: f64,
    pub friction: f64,
    pub u_max: f64,
    pub max_speed: f64,
    pub noise_std: f64,
    /// Std of the perturbation around the hanging rest state at reset.
    pub reset_std: f64,
    pub obs_noise_std: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            g: 10.0,
            m: 1.0,
            l: 1.0,
            dt: 0.05,
            friction: 0.05,
            u_max: 2.0,
            max_speed: 8.0,
            noise_std: 0.01,
            reset_std: 0.05,
            obs_noise_std: 0.0,
        }
    }
}

/// Torque-controlled pendulum with friction. State `(θ, θ̇)`, θ = 0 upright.
#[derive(Debug, Clone)]
pub struct Pendulum {
    config: PendulumConfig,
    u_max: [f64; 1],
}

/// Maps an angle to [−π, π).
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    pub fn new(config: PendulumConfig) -> Result<Self> {
        if !(config.u_max > 0.0) || !(config.dt > 0.0) || !(config.max_speed > 0.0) {
            return Err(Error::Validation("pendulum u_max, dt and max_speed must be positive".into()));
        }
        if !(config.noise_std >= 0.0) || !(config.reset_std >= 0.0) || !(config.obs_noise_std >= 0.0) {
            return Err(Error::Validation("pendulum noise std must be ≥ 0".into()));
        }
        Ok(Self {
            u_max: [config.u_max],
            config,
        })
    }

    pub fn config(&self) -> &PendulumConfig {
        &self.config
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            kind: EnvKind::Pendulum,
            state_dim: 2,
            obs_dim: 2,
            action_dim: 1,
            u_max: Some(self.u_max.to_vec()),
            dt: Some(self.config.dt),
            noise_std: vec![self.config.noise_std; 2],
        }
    }

    /// Hanging at rest with a small Gaussian perturbation.
    pub fn reset(&self, rng: &mut impl Rng) -> Vec<f64> {
        let n = crate::rng::standard_normal(rng, 2);
        vec![PI + self.config.reset_std * n[0], self.config.reset_std * n[1]]
    }

    fn coefficients(&self) -> (f64, f64) {
        let c = &self.config;
        (-3.0 * c.g / (2.0 * c.l), 3.0 / (c.m * c.l * c.l))
    }

    pub fn step_values(&self, state: &[f64], action: &[f64], noise: &[f64]) -> Vec<f64> {
        let c = &self.config;
        let (grav, gain) = self.coefficients();
        let u = action[0].clamp(-c.u_max, c.u_max);
        let (theta, omega) = (state[0], state[1]);
        let omega = omega + (grav * (theta + PI).sin() + gain * (u - c.friction * omega)) * c.dt;
        let theta = theta + omega * c.dt;
        let theta = theta + c.noise_std * noise[0];
        let omega = (omega + c.noise_std * noise[1]).clamp(-c.max_speed, c.max_speed);
        vec![theta, omega]
    }
}

impl Dynamics for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bound(&self) -> Option<&[f64]> {
        Some(&self.u_max)
    }

    fn step(&self, tape: &mut Tape, _ctx: &StepContext, state: Var, action: Var, noise: Var) -> Result<Var> {
        let c = &self.config;
        let (grav, gain) = self.coefficients();
        let u = tape.clamp(action, -c.u_max, c.u_max);
        let theta = tape.slice(state, 0, 1)?;
        let omega = tape.slice(state, 1, 1)?;

        let shifted = tape.offset(theta, PI);
        let s = tape.sin(shifted);
        let gravity = tape.scale(s, grav);
        let fric = tape.scale(omega, c.friction);
        let torque = tape.sub(u, fric)?;
        let torque = tape.scale(torque, gain);
        let acc = tape.add(gravity, torque)?;
        let dv = tape.scale(acc, c.dt);
        let omega = tape.add(omega, dv)?;
        let dtheta = tape.scale(omega, c.dt);
        let theta = tape.add(theta, dtheta)?;

        let scaled = tape.scale(noise, c.noise_std);
        let next = tape.concat(&[theta, omega])?;
        let next = tape.add(next, scaled)?;
        let theta = tape.slice(next, 0, 1)?;
        let omega = tape.slice(next, 1, 1)?;
        let omega = tape.clamp(omega, -c.max_speed, c.max_speed);
        Ok(tape.concat(&[theta, omega])?)
    }

    /// `(cos θ, sin θ, θ̇ / max_speed)`: continuous in θ without wrapping.
    fn features(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        let theta = tape.slice(state, 0, 1)?;
        let omega = tape.slice(state, 1, 1)?;
        let c = tape.cos(theta);
        let s = tape.sin(theta);
        let w = tape.scale(omega, 1.0 / self.config.max_speed);
        Ok(tape.concat(&[c, s, w])?)
    }

    fn feature_dim(&self) -> usize {
        3
    }

    fn delta_scale(&self) -> Vec<f64> {
        let c = &self.config;
        let (_, gain) = self.coefficients();
        let dv = gain * c.u_max * c.dt;
        vec![dv * c.dt, dv]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(s: [f64; 2], u: f64) -> Vec<f64> {
        Pendulum::new(PendulumConfig::default())
            .unwrap()
            .step_values(&s, &[u], &[0.0, 0.0])
    }

    #[test]
    fn upright_rest_is_a_fixed_point() {
        let s = step([0.0, 0.0], 0.0);
        assert!(s[0].abs() < 1e-15 && s[1].abs() < 1e-15, "{s:?}");
    }

    #[test]
    fn unit_torque_from_rest() {
        let s = step([0.0, 0.0], 1.0);
        assert!((s[1] - 0.15).abs() < 1e-15);
        assert!((s[0] - 0.0075).abs() < 1e-15);
    }

    #[test]
    fn speed_is_clipped() {
        assert!(step([0.0, 9.0], 0.0)[1] <= 8.0);
        assert_eq!(step([0.0, -9.0], 0.0)[1], -8.0);
    }

    #[test]
    fn torque_is_clamped_to_bound() {
        assert_eq!(step([0.0, 0.0], 50.0), step([0.0, 0.0], 2.0));
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-0.3) + 0.3).abs() < 1e-15);
        assert!((wrap_angle(4.0 * PI + 0.1) - 0.1).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), -PI);
    }
}
