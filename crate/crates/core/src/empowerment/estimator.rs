use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::distributions::{gaussian_kl, squash, DiagonalGaussian};
use crate::envs::{Dynamics, StepContext};
use crate::error::{Error, Result};
use crate::networks::{
    Activation, Binding, Checkpoint, LayerSpec, Mlp, MlpSpec, ParameterStore, UpdateRule,
};
use crate::rng::standard_normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    /// State-conditioned Gaussian network.
    Learned { hidden: Vec<LayerSpec> },
    /// State-independent Gaussian over the pre-squash action of a single step.
    Fixed { mean: Vec<f64>, std: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub source: SourceConfig,
    pub planner_hidden: Vec<LayerSpec>,
    pub n_steps: usize,
    pub update: UpdateRule,
    #[serde(with = "crate::networks::clip_norm")]
    pub max_grad_norm: Option<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let hidden = vec![LayerSpec {
            width: 128,
            activation: Activation::Tanh,
        }];
        Self {
            source: SourceConfig::Learned { hidden: hidden.clone() },
            planner_hidden: hidden,
            n_steps: 1,
            update: UpdateRule::default(),
            max_grad_norm: None,
        }
    }
}

/// Dimensions and input scaling the estimator was built against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Signature {
    state_dim: usize,
    feature_dim: usize,
    action_dim: usize,
    noise_dim: usize,
    action_bound: Option<Vec<f64>>,
}

impl Signature {
    fn of(dynamics: &dyn Dynamics) -> Self {
        Self {
            state_dim: dynamics.state_dim(),
            feature_dim: dynamics.feature_dim(),
            action_dim: dynamics.action_dim(),
            noise_dim: dynamics.noise_dim(),
            action_bound: dynamics.action_bound().map(<[f64]>::to_vec),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: EstimatorConfig,
    signature: Signature,
}

/// Standard-normal draws for one batch of bound samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MiNoise {
    pub batch: usize,
    /// `[B, n · n_u]` source noise.
    pub action: Vec<f64>,
    /// One `[B, noise_dim]` block per transition.
    pub transition: Vec<Vec<f64>>,
}

/// Monte-Carlo mean with its standard error (absent for fewer than two samples).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: Option<f64>,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let stderr = (n >= 2).then(|| {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        });
        Self { mean, stderr, samples: n }
    }
}

/// Bound, expected gap and their per-sample sum on the linear-Gaussian channel.
#[derive(Debug, Clone, Copy)]
pub struct GapEstimate {
    pub bound: Estimate,
    pub gap: Estimate,
    /// Per-sample `Î + KL`, whose expectation is the true MI.
    pub total: Estimate,
    pub analytic_mi: f64,
}

struct SingleStep {
    source: DiagonalGaussian,
    next: Var,
    planner: DiagonalGaussian,
    sample: Var,
}

/// Source ω and planner q sharing one parameter store θ.
#[derive(Debug, Clone)]
pub struct EmpowermentEstimator {
    config: EstimatorConfig,
    signature: Signature,
    delta_scale: Vec<f64>,
    store: ParameterStore,
    source: Option<Mlp>,
    planner: Mlp,
}

impl EmpowermentEstimator {
    pub fn new(config: EstimatorConfig, dynamics: &dyn Dynamics, rng: &mut impl Rng) -> Result<Self> {
        let signature = Signature::of(dynamics);
        let n = config.n_steps;
        if n == 0 {
            return Err(Error::Config("n_steps must be ≥ 1".into()));
        }
        let da = signature.action_dim;
        let mut store = ParameterStore::new(config.update).with_max_grad_norm(config.max_grad_norm);
        let source = match &config.source {
            SourceConfig::Learned { hidden } => {
                let spec = MlpSpec {
                    input_dim: signature.feature_dim,
                    hidden: hidden.clone(),
                    heads: MlpSpec::gaussian(1, &[], n * da).heads,
                };
                Some(Mlp::build("source", spec, &mut store, rng)?)
            }
            SourceConfig::Fixed { mean, std } => {
                if mean.len() != da || std.len() != da {
                    return Err(Error::Config(format!(
                        "fixed source needs {da} means and stds, got {} and {}",
                        mean.len(),
                        std.len()
                    )));
                }
                if std.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::Config(format!("fixed source std must be positive, got {std:?}")));
                }
                None
            }
        };
        let extra = if n >= 2 { da + n } else { 0 };
        let spec = MlpSpec {
            input_dim: signature.feature_dim + signature.state_dim + extra,
            hidden: config.planner_hidden.clone(),
            heads: MlpSpec::gaussian(1, &[], da).heads,
        };
        let planner = Mlp::build("planner", spec, &mut store, rng)?;
        Ok(Self {
            delta_scale: dynamics.delta_scale(),
            config,
            signature,
            store,
            source,
            planner,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn n_steps(&self) -> usize {
        self.config.n_steps
    }

    pub fn state_dim(&self) -> usize {
        self.signature.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.signature.action_dim
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn source_net(&self) -> Option<&Mlp> {
        self.source.as_ref()
    }

    pub fn planner_net(&self) -> &Mlp {
        &self.planner
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Binding> {
        self.store.bind(tape, trainable)
    }

    /// Checks that `dynamics` has the dimensions this estimator was built for.
    pub fn check_compatible(&self, dynamics: &dyn Dynamics) -> Result<()> {
        let theirs = Signature::of(dynamics);
        if theirs != self.signature {
            return Err(Error::Validation(format!(
                "estimator was built for {:?} but dynamics provide {:?}",
                self.signature, theirs
            )));
        }
        Ok(())
    }

    pub fn sample_noise(&self, rng: &mut impl Rng, batch: usize) -> MiNoise {
        let n = self.config.n_steps;
        MiNoise {
            batch,
            action: standard_normal(rng, batch * n * self.signature.action_dim),
            transition: (0..n)
                .map(|_| standard_normal(rng, batch * self.signature.noise_dim))
                .collect(),
        }
    }

    fn check_noise(&self, noise: &MiNoise, batch: usize) -> Result<()> {
        let n = self.config.n_steps;
        let ok = noise.batch == batch
            && noise.action.len() == batch * n * self.signature.action_dim
            && noise.transition.len() == n
            && noise.transition.iter().all(|t| t.len() == batch * self.signature.noise_dim);
        if !ok {
            return Err(Error::Validation(format!(
                "noise does not match a batch of {batch} states with n = {n}"
            )));
        }
        Ok(())
    }

    fn source_dist(&self, tape: &mut Tape, theta: &Binding, feats: Var) -> Result<DiagonalGaussian> {
        match (&self.source, &self.config.source) {
            (Some(net), _) => net.forward_gaussian(tape, theta, feats),
            (None, SourceConfig::Fixed { mean, std }) => {
                let n = self.config.n_steps;
                let mean: Vec<f64> = mean.iter().copied().cycle().take(n * mean.len()).collect();
                let std: Vec<f64> = std.iter().copied().cycle().take(n * std.len()).collect();
                let shape = [mean.len()];
                DiagonalGaussian::constant(tape, &mean, &std, &shape)
            }
            (None, SourceConfig::Learned { .. }) => unreachable!("learned source always has a network"),
        }
    }

    /// Source distribution over the pre-squash action(s) at each state of `states`.
    pub fn source_distribution(&self, tape: &mut Tape, theta: &Binding, dynamics: &dyn Dynamics, states: Var) -> Result<DiagonalGaussian> {
        let feats = dynamics.features(tape, states)?;
        self.source_dist(tape, theta, feats)
    }

    fn to_action(&self, tape: &mut Tape, pre: Var) -> Result<Var> {
        match &self.signature.action_bound {
            Some(bound) => Ok(squash(tape, pre, bound)?.action),
            None => Ok(pre),
        }
    }

    fn delta(&self, tape: &mut Tape, from: Var, to: Var, steps: usize) -> Result<Var> {
        let d = tape.sub(to, from)?;
        let inv: Vec<f64> = self.delta_scale.iter().map(|s| 1.0 / (s * steps as f64)).collect();
        let inv = tape.constant(inv, &[self.signature.state_dim])?;
        Ok(tape.mul(d, inv)?)
    }

    fn single_step(
        &self,
        tape: &mut Tape,
        theta: &Binding,
        dynamics: &dyn Dynamics,
        ctx: &StepContext,
        states: Var,
        noise: &MiNoise,
    ) -> Result<SingleStep> {
        let b = tape.shape(states)[0];
        self.check_noise(noise, b)?;
        let da = self.signature.action_dim;
        let feats = dynamics.features(tape, states)?;
        let source = self.source_dist(tape, theta, feats)?;
        let eps = tape.constant(noise.action.clone(), &[b, da])?;
        let pre = source.rsample(tape, eps)?;
        let action = self.to_action(tape, pre)?;
        let eps_s = tape.constant(noise.transition[0].clone(), &[b, self.signature.noise_dim])?;
        let next = dynamics.step(tape, ctx, states, action, eps_s)?;
        let ln_source = source.log_prob(tape, pre)?;
        let delta = self.delta(tape, states, next, 1)?;
        let input = tape.concat(&[feats, delta])?;
        let planner = self.planner.forward_gaussian(tape, theta, input)?;
        let ln_planner = planner.log_prob(tape, pre)?;
        let sample = tape.sub(ln_planner, ln_source)?;
        Ok(SingleStep {
            source,
            next,
            planner,
            sample,
        })
    }

    /// Per-state samples `ln q(a|s',s) − ln ω(a|s)` for a `[B, d_s]` batch,
    /// with a ~ ω(·|s) then s' ~ p(·|s, a). Returns a `[B]` tensor.
    pub fn mi_bound_sample(
        &self,
        tape: &mut Tape,
        theta: &Binding,
        dynamics: &dyn Dynamics,
        ctx: &StepContext,
        states: Var,
        noise: &MiNoise,
    ) -> Result<Var> {
        if self.config.n_steps != 1 {
            return Err(Error::Config(format!(
                "single-step bound requested from a {}-step estimator",
                self.config.n_steps
            )));
        }
        Ok(self.single_step(tape, theta, dynamics, ctx, states, noise)?.sample)
    }

    /// Chain version: a_{0:n−1} ~ ω(·|s) applied stepwise to reach s_n, then
    /// `Σ_k ln q(a_k | s_n, a_{k−1}, s) − ln ω(a_{0:n−1} | s)`.
    pub fn nstep_rollout_sample(
        &self,
        tape: &mut Tape,
        theta: &Binding,
        dynamics: &dyn Dynamics,
        ctx: &StepContext,
        states: Var,
        noise: &MiNoise,
    ) -> Result<Var> {
        let b = tape.shape(states)[0];
        self.check_noise(noise, b)?;
        let n = self.config.n_steps;
        let da = self.signature.action_dim;
        let feats = dynamics.features(tape, states)?;
        let source = self.source_dist(tape, theta, feats)?;
        let eps = tape.constant(noise.action.clone(), &[b, n * da])?;
        let pre_all = source.rsample(tape, eps)?;

        let mut pres = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        let mut s = states;
        for (k, eps_k) in noise.transition.iter().enumerate() {
            let pre = if n == 1 { pre_all } else { tape.slice(pre_all, k * da, da)? };
            let action = self.to_action(tape, pre)?;
            let eps_s = tape.constant(eps_k.clone(), &[b, self.signature.noise_dim])?;
            s = dynamics.step(tape, ctx, s, action, eps_s)?;
            pres.push(pre);
            actions.push(action);
        }
        let ln_source = source.log_prob(tape, pre_all)?;
        let delta = self.delta(tape, states, s, n)?;

        let mut ln_planner: Option<Var> = None;
        for k in 0..n {
            let input = if n == 1 {
                tape.concat(&[feats, delta])?
            } else {
                let prev = if k == 0 {
                    tape.constant(vec![0.0; b * da], &[b, da])?
                } else {
                    match &self.signature.action_bound {
                        Some(_) => tape.tanh(pres[k - 1]),
                        None => actions[k - 1],
                    }
                };
                let mut hot = vec![0.0; b * n];
                for row in 0..b {
                    hot[row * n + k] = 1.0;
                }
                let hot = tape.constant(hot, &[b, n])?;
                tape.concat(&[feats, delta, prev, hot])?
            };
            let q = self.planner.forward_gaussian(tape, theta, input)?;
            let lp = q.log_prob(tape, pres[k])?;
            ln_planner = Some(match ln_planner {
                None => lp,
                Some(acc) => tape.add(acc, lp)?,
            });
        }
        let ln_planner = ln_planner.expect("n ≥ 1 factors");
        Ok(tape.sub(ln_planner, ln_source)?)
    }

    /// Dispatches to the single-step or chain sample depending on `n_steps`.
    pub fn bound_samples(
        &self,
        tape: &mut Tape,
        theta: &Binding,
        dynamics: &dyn Dynamics,
        ctx: &StepContext,
        states: Var,
        noise: &MiNoise,
    ) -> Result<Var> {
        if self.config.n_steps == 1 {
            self.mi_bound_sample(tape, theta, dynamics, ctx, states, noise)
        } else {
            self.nstep_rollout_sample(tape, theta, dynamics, ctx, states, noise)
        }
    }

    /// Plain sample values for a flat `[B, d_s]` batch of states.
    pub fn sample_values(&self, dynamics: &dyn Dynamics, states: &[f64], noise: &MiNoise) -> Result<Vec<f64>> {
        let ds = self.signature.state_dim;
        let mut tape = Tape::new();
        let theta = self.bind(&mut tape, false)?;
        let ctx = dynamics.prepare(&mut tape)?;
        let s = tape.constant(states.to_vec(), &[states.len() / ds, ds])?;
        let out = self.bound_samples(&mut tape, &theta, dynamics, &ctx, s, noise)?;
        Ok(tape.value(out).to_vec())
    }

    /// Monte-Carlo estimate of the bound at `state` from `samples` draws.
    pub fn estimate_empowerment(&self, dynamics: &dyn Dynamics, state: &[f64], samples: usize, rng: &mut impl Rng) -> Result<Estimate> {
        Ok(self.estimate_many(dynamics, &[state.to_vec()], samples, rng)?[0])
    }

    /// Estimates at several states, batching all draws through one tape per chunk.
    pub fn estimate_many(&self, dynamics: &dyn Dynamics, states: &[Vec<f64>], samples: usize, rng: &mut impl Rng) -> Result<Vec<Estimate>> {
        if samples == 0 {
            return Err(Error::Validation("need at least one Monte-Carlo sample".into()));
        }
        let per_chunk = (8192 / samples).max(1);
        let mut out = Vec::with_capacity(states.len());
        for chunk in states.chunks(per_chunk) {
            let mut flat = Vec::with_capacity(chunk.len() * samples * self.signature.state_dim);
            for s in chunk {
                if s.len() != self.signature.state_dim {
                    return Err(Error::Validation(format!(
                        "state has {} coordinates, estimator expects {}",
                        s.len(),
                        self.signature.state_dim
                    )));
                }
                for _ in 0..samples {
                    flat.extend_from_slice(s);
                }
            }
            let noise = self.sample_noise(rng, chunk.len() * samples);
            let values = self.sample_values(dynamics, &flat, &noise)?;
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite bound sample {bad}")));
            }
            out.extend(values.chunks(samples).map(Estimate::from_samples));
        }
        Ok(out)
    }

    /// Expected KL between the exact action posterior and the planner on the
    /// linear-Gaussian channel, together with the bound it accompanies.
    pub fn gap_estimate_linear_gaussian(&self, dynamics: &dyn Dynamics, state: &[f64], samples: usize, rng: &mut impl Rng) -> Result<GapEstimate> {
        let channel = dynamics.as_linear_gaussian().ok_or_else(|| {
            Error::Unsupported("the gap needs the analytic posterior of the linear-Gaussian channel".into())
        })?;
        if self.signature.action_bound.is_some() {
            return Err(Error::Unsupported("the gap needs an unbounded (Gaussian) action distribution".into()));
        }
        if self.config.n_steps != 1 {
            return Err(Error::Unsupported("the gap is implemented for single-step estimators".into()));
        }
        let ds = self.signature.state_dim;
        let mut flat = Vec::with_capacity(samples * ds);
        for _ in 0..samples {
            flat.extend_from_slice(state);
        }
        let noise = self.sample_noise(rng, samples);
        let mut tape = Tape::new();
        let theta = self.bind(&mut tape, false)?;
        let ctx = dynamics.prepare(&mut tape)?;
        let s = tape.constant(flat, &[samples, ds])?;
        let out = self.single_step(&mut tape, &theta, dynamics, &ctx, s, &noise)?;

        let row = |v: Var, i: usize| -> Vec<f64> {
            let vals = tape.value(v);
            if vals.len() == ds {
                vals.to_vec()
            } else {
                vals[i * ds..(i + 1) * ds].to_vec()
            }
        };
        let source_mean = row(out.source.mean, 0);
        let source_std = row(out.source.std, 0);
        let bound: Vec<f64> = tape.value(out.sample).to_vec();
        let mut gaps = Vec::with_capacity(samples);
        for i in 0..samples {
            let next = row(out.next, i);
            let (pm, ps) = channel.posterior(&source_mean, &source_std, state, &next);
            gaps.push(gaussian_kl(&pm, &ps, &row(out.planner.mean, i), &row(out.planner.std, i)));
        }
        let totals: Vec<f64> = bound.iter().zip(&gaps).map(|(a, b)| a + b).collect();
        Ok(GapEstimate {
            bound: Estimate::from_samples(&bound),
            gap: Estimate::from_samples(&gaps),
            total: Estimate::from_samples(&totals),
            analytic_mi: channel.gaussian_source_mi(&source_std),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Metadata {
            config: self.config.clone(),
            signature: self.signature.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        let mut ckpt = Checkpoint::new(text);
        self.store.write_into(&mut ckpt, "theta.");
        Ok(ckpt)
    }

    /// Rebuilds an estimator for `dynamics`; dimensions must match the checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, dynamics: &dyn Dynamics) -> Result<Self> {
        let meta: Metadata = toml::from_str(&ckpt.metadata)
            .map_err(|e| Error::Validation(format!("estimator checkpoint metadata: {e}")))?;
        let theirs = Signature::of(dynamics);
        if theirs != meta.signature {
            return Err(Error::Validation(format!(
                "estimator checkpoint expects {:?} but the configured dynamics provide {:?}",
                meta.signature, theirs
            )));
        }
        let mut rng = crate::rng::stream_rng(0, crate::rng::Stream::Init);
        let mut est = Self::new(meta.config, dynamics, &mut rng)?;
        est.store.read_from(ckpt, "theta.")?;
        Ok(est)
    }
}
