use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dynamics, EnvKind, EnvSpec, StepContext};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BallConfig {
    pub side: f64,
    pub u_max: f64,
    pub noise_std: f64,
    pub obs_noise_std: f64,
}

impl Default for BallConfig {
    fn default() -> Self {
        Self {
            side: 10.0,
            u_max: 0.5,
            noise_std: 0.05,
            obs_noise_std: 0.0,
        }
    }
}

/// A point ball in a square box, controlled by position increments. Motion
/// into a wall is absorbed.
#[derive(Debug, Clone)]
pub struct Ball {
    config: BallConfig,
    u_max: [f64; 2],
}

impl Ball {
    pub fn new(config: BallConfig) -> Result<Self> {
        if !(config.side > 0.0) || !(config.u_max > 0.0) {
            return Err(Error::Validation("ball side and u_max must be positive".into()));
        }
        if !(config.noise_std >= 0.0) || !(config.obs_noise_std >= 0.0) {
            return Err(Error::Validation("ball noise std must be ≥ 0".into()));
        }
        Ok(Self {
            u_max: [config.u_max; 2],
            config,
        })
    }

    pub fn config(&self) -> &BallConfig {
        &self.config
    }

    pub fn half_side(&self) -> f64 {
        self.config.side / 2.0
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            kind: EnvKind::Ball,
            state_dim: 2,
            obs_dim: 2,
            action_dim: 2,
            u_max: Some(self.u_max.to_vec()),
            dt: None,
            noise_std: vec![self.config.noise_std; 2],
        }
    }

    /// Uniform over the box.
    pub fn reset(&self, rng: &mut impl Rng) -> Vec<f64> {
        let h = self.half_side();
        (0..2).map(|_| rng.random_range(-h..=h)).collect()
    }

    /// Distance to the nearest wall.
    pub fn wall_distance(&self, pos: &[f64]) -> f64 {
        let h = self.half_side();
        pos.iter().map(|p| h - p.abs()).fold(f64::INFINITY, f64::min)
    }

    pub fn step_values(&self, state: &[f64], action: &[f64], noise: &[f64]) -> Vec<f64> {
        let h = self.half_side();
        let u = self.config.u_max;
        state
            .iter()
            .zip(action)
            .zip(noise)
            .map(|((&p, &a), &n)| (p + a.clamp(-u, u) + self.config.noise_std * n).clamp(-h, h))
            .collect()
    }
}

impl Dynamics for Ball {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_bound(&self) -> Option<&[f64]> {
        Some(&self.u_max)
    }

    fn step(&self, tape: &mut Tape, _ctx: &StepContext, state: Var, action: Var, noise: Var) -> Result<Var> {
        let h = self.half_side();
        let u = tape.clamp(action, -self.config.u_max, self.config.u_max);
        let n = tape.scale(noise, self.config.noise_std);
        let moved = tape.add(state, u)?;
        let moved = tape.add(moved, n)?;
        Ok(tape.clamp(moved, -h, h))
    }

    fn features(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        Ok(tape.scale(state, 1.0 / self.half_side()))
    }

    fn delta_scale(&self) -> Vec<f64> {
        vec![self.config.u_max; 2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball() -> Ball {
        Ball::new(BallConfig::default()).unwrap()
    }

    #[test]
    fn free_space_translation() {
        let s = ball().step_values(&[0.0, 0.0], &[0.1, 0.0], &[0.0, 0.0]);
        assert_eq!(s, vec![0.1, 0.0]);
    }

    #[test]
    fn outward_push_at_wall_is_absorbed() {
        let s = ball().step_values(&[5.0, 1.0], &[0.3, 0.0], &[0.0, 0.0]);
        assert_eq!(s, vec![5.0, 1.0]);
    }

    #[test]
    fn corner_absorbs_both_axes() {
        let s = ball().step_values(&[-5.0, 5.0], &[-0.4, 0.4], &[0.0, 0.0]);
        assert_eq!(s, vec![-5.0, 5.0]);
    }

    #[test]
    fn wall_distance_is_to_the_nearest_wall() {
        assert_eq!(ball().wall_distance(&[0.0, 0.0]), 5.0);
        assert_eq!(ball().wall_distance(&[4.0, -1.0]), 1.0);
        assert_eq!(ball().wall_distance(&[-2.0, -4.5]), 0.5);
    }
}
