use serde::{Deserialize, Serialize};

use super::{Dynamics, EnvKind, EnvSpec, StepContext};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearGaussianConfig {
    pub dim: usize,
    /// Channel noise std σ_ε, shared by every dimension.
    pub noise_std: f64,
    /// Optional tanh bound on the action; unbounded when absent.
    pub u_max: Option<f64>,
}

impl Default for LinearGaussianConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            noise_std: 1.0,
            u_max: None,
        }
    }
}

/// Verification channel `s' = s + a + σ_ε ⊙ ε`.
#[derive(Debug, Clone)]
pub struct LinearGaussian {
    config: LinearGaussianConfig,
    u_max: Option<Vec<f64>>,
}

impl LinearGaussian {
    pub fn new(config: LinearGaussianConfig) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::Validation("linear-Gaussian dim must be ≥ 1".into()));
        }
        if !(config.noise_std > 0.0) {
            return Err(Error::Validation("linear-Gaussian noise std must be positive".into()));
        }
        if let Some(u) = config.u_max {
            if !(u > 0.0) {
                return Err(Error::Validation(format!("u_max must be positive, got {u}")));
            }
        }
        Ok(Self {
            u_max: config.u_max.map(|u| vec![u; config.dim]),
            config,
        })
    }

    pub fn noise_std(&self) -> f64 {
        self.config.noise_std
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            kind: EnvKind::LinearGaussian,
            state_dim: self.config.dim,
            obs_dim: self.config.dim,
            action_dim: self.config.dim,
            u_max: self.u_max.clone(),
            dt: None,
            noise_std: vec![self.config.noise_std; self.config.dim],
        }
    }

    pub fn step_values(&self, state: &[f64], action: &[f64], noise: &[f64]) -> Vec<f64> {
        state
            .iter()
            .zip(action)
            .zip(noise)
            .map(|((&s, &a), &n)| s + a + self.config.noise_std * n)
            .collect()
    }

    /// MI between a and s' for an unbounded source `a ~ N(μ, diag σ_ω²)`.
    pub fn gaussian_source_mi(&self, source_std: &[f64]) -> f64 {
        let e2 = self.config.noise_std.powi(2);
        source_std.iter().map(|s| 0.5 * (1.0 + s * s / e2).ln()).sum()
    }

    /// Exact posterior p(a | s', s) for the source `N(mean, diag std²)`.
    pub fn posterior(&self, source_mean: &[f64], source_std: &[f64], s: &[f64], s_next: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let e2 = self.config.noise_std.powi(2);
        let mut mean = Vec::with_capacity(s.len());
        let mut std = Vec::with_capacity(s.len());
        for i in 0..s.len() {
            let v = source_std[i].powi(2);
            let gain = v / (v + e2);
            mean.push(source_mean[i] + gain * (s_next[i] - s[i] - source_mean[i]));
            std.push((v * e2 / (v + e2)).sqrt());
        }
        (mean, std)
    }
}

impl Dynamics for LinearGaussian {
    fn state_dim(&self) -> usize {
        self.config.dim
    }

    fn action_dim(&self) -> usize {
        self.config.dim
    }

    fn action_bound(&self) -> Option<&[f64]> {
        self.u_max.as_deref()
    }

    fn step(&self, tape: &mut Tape, _ctx: &StepContext, state: Var, action: Var, noise: Var) -> Result<Var> {
        let n = tape.scale(noise, self.config.noise_std);
        let moved = tape.add(state, action)?;
        Ok(tape.add(moved, n)?)
    }

    fn as_linear_gaussian(&self) -> Option<&LinearGaussian> {
        Some(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel(std: f64) -> LinearGaussian {
        LinearGaussian::new(LinearGaussianConfig {
            noise_std: std,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn affine_step() {
        assert_eq!(channel(1.0).step_values(&[0.0], &[0.0], &[0.0]), vec![0.0]);
        assert_eq!(channel(1.0).step_values(&[1.0], &[2.0], &[0.5]), vec![3.5]);
    }

    #[test]
    fn action_jacobian_is_identity() {
        let c = LinearGaussian::new(LinearGaussianConfig {
            dim: 2,
            ..Default::default()
        })
        .unwrap();
        let mut t = Tape::new();
        let s = t.constant(vec![0.3, -0.2], &[1, 2]).unwrap();
        let a = t.param(vec![1.0, 2.0], &[1, 2]).unwrap();
        let n = t.constant(vec![0.1, 0.1], &[1, 2]).unwrap();
        let out = c.step(&mut t, &StepContext::default(), s, a, n).unwrap();
        for i in 0..2 {
            let o = t.slice(out, i, 1).unwrap();
            let o = t.sum(o);
            t.backward(o).unwrap();
            let mut e = vec![0.0, 0.0];
            e[i] = 1.0;
            assert_eq!(t.grad(a), e);
        }
    }

    #[test]
    fn capacity_of_gaussian_source() {
        let c = channel(1.0);
        assert!((c.gaussian_source_mi(&[1.0]) - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(c.gaussian_source_mi(&[0.0]), 0.0);
    }

    #[test]
    fn posterior_matches_bayes_rule_on_a_grid() {
        // posterior density ∝ N(a; μ, σ_ω²) N(s' − s − a; 0, σ_ε²), normalized numerically
        let c = channel(0.7);
        let (mu, sw, s, sn) = (0.4, 1.3, 0.2, 1.9);
        let (pm, ps) = c.posterior(&[mu], &[sw], &[s], &[sn]);
        let h = 1e-3;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in -20000..=20000 {
            let a = i as f64 * h;
            let w = (-0.5 * ((a - mu) / sw).powi(2) - 0.5 * ((sn - s - a) / 0.7).powi(2)).exp();
            z += w;
            m1 += w * a;
            m2 += w * a * a;
        }
        let mean = m1 / z;
        let var = m2 / z - mean * mean;
        assert!((pm[0] - mean).abs() < 1e-8, "{} vs {mean}", pm[0]);
        assert!((ps[0] * ps[0] - var).abs() < 1e-8);
    }
}
