use crate::autodiff::{Tape, Var};
use crate::envs::{Dataset, Dynamics, StepContext};
use crate::error::{Error, Result};
use crate::networks::{Array, Checkpoint};

use super::DvbfModel;

/// Learned transition used as a stochastic simulator:
/// `z' = μ_trans(z, u) + σ_trans(z, u) ⊙ ε`. Parameters enter the tape as
/// constants, so gradients flow to states and actions only.
#[derive(Debug, Clone)]
pub struct LatentDynamics {
    model: DvbfModel,
    delta_scale: Vec<f64>,
}

impl LatentDynamics {
    pub fn new(model: DvbfModel) -> Self {
        let delta_scale = vec![1.0; model.latent_dim()];
        Self { model, delta_scale }
    }

    pub fn model(&self) -> &DvbfModel {
        &self.model
    }

    pub fn with_delta_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.model.latent_dim() || scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation("latent delta scale needs one positive entry per latent dim".into()));
        }
        self.delta_scale = scale;
        Ok(self)
    }

    /// Per-dimension RMS of the mean latent change over `(z, u)` pairs, floored at 1e-3.
    pub fn measure_delta_scale(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<f64>> {
        let nz = self.model.latent_dim();
        let nu = self.model.action_dim();
        if states.is_empty() || states.len() != actions.len() {
            return Err(Error::Validation("delta scale needs matching, non-empty state/action lists".into()));
        }
        let b = states.len();
        let mut tape = Tape::new();
        let params = self.model.bind(&mut tape, false)?;
        let z = tape.constant(states.concat(), &[b, nz])?;
        let u = tape.constant(actions.concat(), &[b, nu])?;
        let (mt, _, _) = self.model.transition(&mut tape, &params, z, u)?;
        let next = tape.value(mt);
        let zs = tape.value(z);
        let mut sq = vec![0.0; nz];
        for i in 0..b * nz {
            sq[i % nz] += (next[i] - zs[i]).powi(2);
        }
        Ok(sq.into_iter().map(|s| (s / b as f64).sqrt().max(1e-3)).collect())
    }

    /// Latent beliefs along every dataset episode, from step K − 1 on.
    pub fn encode_dataset(&self, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
        let skip = self.model.config().init_window - 1;
        let mut out = Vec::new();
        for ep in &dataset.episodes {
            let beliefs = self.model.filter_episode(&ep.observations, &ep.actions)?;
            out.extend(beliefs.into_iter().skip(skip).map(|b| b.z));
        }
        if out.is_empty() {
            return Err(Error::Validation("dataset has no episode long enough to encode".into()));
        }
        Ok(out)
    }

    /// Latent state of a system held at observation `x`: K repeated
    /// observations with zero actions, filtered to the last one.
    pub fn encode_stationary(&self, x: &[f64]) -> Result<Vec<f64>> {
        let k = self.model.config().init_window;
        let observations = vec![x.to_vec(); k];
        let actions = vec![vec![0.0; self.model.action_dim()]; k - 1];
        let beliefs = self.model.filter_episode(&observations, &actions)?;
        Ok(beliefs.last().expect("K ≥ 1 beliefs").z.clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = self.model.to_checkpoint()?;
        ckpt.insert("latent.delta_scale", Array::new(vec![self.delta_scale.len()], self.delta_scale.clone())?);
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = DvbfModel::from_checkpoint(ckpt)?;
        let scale = ckpt
            .get("latent.delta_scale")
            .ok_or_else(|| Error::Validation("dynamics checkpoint lacks latent.delta_scale".into()))?;
        Self::new(model).with_delta_scale(scale.data.clone())
    }
}

impl Dynamics for LatentDynamics {
    fn state_dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn action_dim(&self) -> usize {
        self.model.action_dim()
    }

    fn action_bound(&self) -> Option<&[f64]> {
        self.model.action_bound()
    }

    fn prepare(&self, tape: &mut Tape) -> Result<StepContext> {
        Ok(StepContext {
            binding: Some(self.model.bind(tape, false)?),
        })
    }

    fn step(&self, tape: &mut Tape, ctx: &StepContext, state: Var, action: Var, noise: Var) -> Result<Var> {
        let params = ctx
            .binding
            .as_ref()
            .ok_or_else(|| Error::Validation("latent dynamics stepped without prepare()".into()))?;
        let (mean, var, _) = self.model.transition(tape, params, state, action)?;
        let std = tape.sqrt(var)?;
        let jump = tape.mul(std, noise)?;
        Ok(tape.add(mean, jump)?)
    }

    fn delta_scale(&self) -> Vec<f64> {
        self.delta_scale.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::dvbf::DvbfConfig;
    use crate::networks::{Activation, LayerSpec};
    use crate::rng::{stream_rng, Stream};

    fn model() -> DvbfModel {
        let h = |a| {
            vec![LayerSpec {
                width: 5,
                activation: a,
            }]
        };
        let cfg = DvbfConfig {
            latent_dim: 3,
            init_window: 2,
            transition_hidden: h(Activation::Sigmoid),
            measurement_hidden: h(Activation::Relu),
            decoder_hidden: h(Activation::Relu),
            initial_encoder_hidden: h(Activation::Relu),
            initial_transform_hidden: h(Activation::Tanh),
            ..Default::default()
        };
        DvbfModel::new(cfg, 2, 1, Some(vec![2.0]), vec![0.0; 2], vec![1.0; 2], &mut stream_rng(9, Stream::Init)).unwrap()
    }

    #[test]
    fn zero_noise_step_is_the_transition_mean() {
        let dynamics = LatentDynamics::new(model());
        let mut t = Tape::new();
        let ctx = dynamics.prepare(&mut t).unwrap();
        let z = t.constant(vec![0.1, -0.2, 0.3], &[1, 3]).unwrap();
        let u = t.constant(vec![1.5], &[1, 1]).unwrap();
        let e = t.constant(vec![0.0; 3], &[1, 3]).unwrap();
        let next = dynamics.step(&mut t, &ctx, z, u, e).unwrap();
        let p = ctx.binding.clone().unwrap();
        let (mt, _, _) = dynamics.model().transition(&mut t, &p, z, u).unwrap();
        assert_eq!(t.value(next), t.value(mt));
    }

    #[test]
    fn step_is_differentiable_in_the_action() {
        let dynamics = LatentDynamics::new(model());
        let err = finite_difference_check(
            |t: &mut Tape, u: Var| -> Result<Var> {
                let ctx = dynamics.prepare(t)?;
                let z = t.constant(vec![0.1, -0.2, 0.3], &[1, 3])?;
                let e = t.constant(vec![0.4, -1.0, 0.2], &[1, 3])?;
                let u = t.reshape(u, &[1, 1])?;
                let next = dynamics.step(t, &ctx, z, u, e)?;
                let sq = t.square(next);
                Ok(t.sum(sq))
            },
            &[0.7],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn delta_scale_is_positive_and_validated() {
        let dynamics = LatentDynamics::new(model());
        let s = dynamics
            .measure_delta_scale(&[vec![0.0; 3], vec![1.0, 0.0, -1.0]], &[vec![1.0], vec![-1.0]])
            .unwrap();
        assert!(s.iter().all(|&v| v >= 1e-3));
        assert!(dynamics.clone().with_delta_scale(vec![1.0]).is_err());
        assert!(dynamics.with_delta_scale(s).is_ok());
    }
}
