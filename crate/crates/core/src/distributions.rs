//! Diagonal Gaussians on the tape, reparametrized sampling and tanh squashing.
//!
//! Densities are always evaluated on the pre-squash variable. For the
//! log-ratio ln q(a) − ln ω(a) the tanh Jacobian appears in both terms and
//! cancels, so no change-of-variables correction is applied anywhere.

use crate::autodiff::{Tape, Var};
use crate::error::Result;

/// Floor applied to every standard deviation produced by a network head.
pub const STD_MIN: f64 = 1e-3;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Independent Gaussian per coordinate. Batched tensors are `[n, d]`.
#[derive(Debug, Clone, Copy)]
pub struct DiagonalGaussian {
    pub mean: Var,
    pub std: Var,
}

impl DiagonalGaussian {
    pub fn new(tape: &Tape, mean: Var, std: Var) -> Result<Self> {
        if tape.shape(mean) != tape.shape(std) {
            return Err(crate::autodiff::AutodiffError::ShapeMismatch {
                op: "gaussian",
                shapes: vec![tape.shape(mean).to_vec(), tape.shape(std).to_vec()],
            }
            .into());
        }
        Ok(Self { mean, std })
    }

    /// Builds a Gaussian from a variance tensor.
    pub fn from_variance(tape: &mut Tape, mean: Var, variance: Var) -> Result<Self> {
        let std = tape.sqrt(variance)?;
        Self::new(tape, mean, std)
    }

    /// Constant (non-differentiable) Gaussian.
    pub fn constant(tape: &mut Tape, mean: &[f64], std: &[f64], shape: &[usize]) -> Result<Self> {
        let m = tape.constant(mean.to_vec(), shape)?;
        let s = tape.constant(std.to_vec(), shape)?;
        Self::new(tape, m, s)
    }

    /// `mean + std ⊙ noise`, differentiable in mean and std.
    pub fn rsample(&self, tape: &mut Tape, noise: Var) -> Result<Var> {
        let scaled = tape.mul(self.std, noise)?;
        Ok(tape.add(self.mean, scaled)?)
    }

    /// Log-density summed over the last axis: `[n, d] → [n]`, `[d] → []`.
    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let diff = tape.sub(x, self.mean)?;
        let z = tape.div(diff, self.std)?;
        let z2 = tape.square(z);
        let quad = tape.scale(z2, -0.5);
        let ln_std = tape.ln(self.std)?;
        let per_dim = tape.sub(quad, ln_std)?;
        let per_dim = tape.offset(per_dim, -HALF_LN_2PI);
        Ok(tape.sum_last(per_dim))
    }

    /// Closed-form KL(self ‖ N(0, I)) summed over the last axis.
    pub fn kl_to_standard_normal(&self, tape: &mut Tape) -> Result<Var> {
        let m2 = tape.square(self.mean);
        let s2 = tape.square(self.std);
        let ln_s = tape.ln(self.std)?;
        let two_ln_s = tape.scale(ln_s, 2.0);
        let a = tape.add(m2, s2)?;
        let b = tape.sub(a, two_ln_s)?;
        let b = tape.offset(b, -1.0);
        let per_dim = tape.scale(b, 0.5);
        Ok(tape.sum_last(per_dim))
    }
}

/// A tanh-squashed action together with its pre-squash Gaussian variable.
#[derive(Debug, Clone)]
pub struct SquashedAction {
    pub pre_squash: Var,
    pub action: Var,
    pub u_max: Vec<f64>,
}

/// `action = u_max ⊙ tanh(pre)`.
pub fn squash(tape: &mut Tape, pre: Var, u_max: &[f64]) -> Result<SquashedAction> {
    if let Some(bad) = u_max.iter().find(|&&u| !(u > 0.0)) {
        return Err(crate::error::Error::Validation(format!(
            "action bound must be positive, got {bad}"
        )));
    }
    let t = tape.tanh(pre);
    let bound = tape.constant(u_max.to_vec(), &[u_max.len()])?;
    let action = tape.mul(t, bound)?;
    Ok(SquashedAction {
        pre_squash: pre,
        action,
        u_max: u_max.to_vec(),
    })
}

/// ln |d action / d pre| summed over the last axis.
pub fn squash_log_det(tape: &mut Tape, pre: Var, u_max: &[f64]) -> Result<Var> {
    let t = tape.tanh(pre);
    let t2 = tape.square(t);
    let one_minus = tape.scale(t2, -1.0);
    let one_minus = tape.offset(one_minus, 1.0);
    let bound = tape.constant(u_max.to_vec(), &[u_max.len()])?;
    let jac = tape.mul(one_minus, bound)?;
    let ln = tape.ln(jac)?;
    Ok(tape.sum_last(ln))
}

/// KL(N(mp, sp²) ‖ N(mq, sq²)) for diagonal Gaussians given as plain values.
pub fn gaussian_kl(mean_p: &[f64], std_p: &[f64], mean_q: &[f64], std_q: &[f64]) -> f64 {
    mean_p
        .iter()
        .zip(std_p)
        .zip(mean_q.iter().zip(std_q))
        .map(|((&mp, &sp), (&mq, &sq))| {
            (sq / sp).ln() + (sp * sp + (mp - mq).powi(2)) / (2.0 * sq * sq) - 0.5
        })
        .sum()
}

/// Log-density of a diagonal Gaussian at `x`, plain values.
pub fn gaussian_log_prob(mean: &[f64], std: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .zip(x)
        .map(|((&m, &s), &x)| {
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - HALF_LN_2PI
        })
        .sum()
}
