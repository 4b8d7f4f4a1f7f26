use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{objective, rollout, Policy, RolloutNoise, TrainingConfig, UpdateMode};
use crate::autodiff::Tape;
use crate::empowerment::EmpowermentEstimator;
use crate::envs::Dynamics;
use crate::error::{Error, Result};

/// Draws `n` states; used for rollout starts and for θ-only coverage batches.
pub type StateSampler<'a, R> = dyn FnMut(&mut R, usize) -> Result<Vec<Vec<f64>>> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainRecord {
    pub epoch: usize,
    pub beta: f64,
    /// Mean bound per visited state.
    pub mean_mi: f64,
    /// Mean KL(π ‖ π₀) per action taken.
    pub policy_kl: f64,
}

fn flatten(states: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    if let Some(bad) = states.iter().find(|s| s.len() != dim) {
        return Err(Error::Validation(format!(
            "sampled state has {} coordinates, dynamics expect {dim}",
            bad.len()
        )));
    }
    Ok(states.concat())
}

struct Batch {
    mean_mi: f64,
    policy_kl: f64,
}

/// One forward/backward pass over a fresh batch of rollouts (plus coverage
/// states). Gradients land in both stores; the caller decides which steps.
#[allow(clippy::too_many_arguments)]
fn accumulate<R: Rng>(
    policy: &mut Policy,
    est: &mut EmpowermentEstimator,
    dynamics: &dyn Dynamics,
    initial: &mut StateSampler<'_, R>,
    coverage: Option<&mut StateSampler<'_, R>>,
    config: &TrainingConfig,
    beta: f64,
    rng: &mut R,
) -> Result<Batch> {
    let ds = dynamics.state_dim();
    let m = config.rollouts;
    let starts = flatten(&initial(rng, m)?, ds)?;
    let noise = RolloutNoise::sample(rng, est, dynamics, m, config.horizon);
    let cover = match coverage {
        Some(sampler) if config.coverage_states > 0 => {
            let states = flatten(&sampler(rng, config.coverage_states)?, ds)?;
            let noise = est.sample_noise(rng, config.coverage_states);
            Some((states, noise))
        }
        _ => None,
    };

    let mut tape = Tape::new();
    let chi = policy.bind(&mut tape, true)?;
    let theta = est.bind(&mut tape, true)?;
    let ctx = dynamics.prepare(&mut tape)?;
    let s0 = tape.constant(starts, &[m, ds])?;
    let r = rollout(&mut tape, policy, &chi, est, &theta, dynamics, &ctx, s0, &noise)?;
    let obj = objective(&mut tape, &r, beta)?;
    let mut value = tape.scale(obj.value, 1.0 / m as f64);
    if let Some((states, noise)) = cover {
        let n = noise.batch;
        let s = tape.constant(states, &[n, ds])?;
        let samples = est.bound_samples(&mut tape, &theta, dynamics, &ctx, s, &noise)?;
        let mean = tape.mean(samples);
        let weighted = tape.scale(mean, beta * config.horizon as f64);
        value = tape.add(value, weighted)?;
    }
    let mi = tape.item(obj.mi_sum);
    let kl = tape.item(obj.kl_sum);
    if !tape.item(value).is_finite() {
        return Err(Error::Numeric(format!("policy objective became non-finite (Î sum {mi}, KL sum {kl})")));
    }
    tape.backward(value)?;
    policy.store_mut().accumulate_grads(&tape, &chi);
    est.store_mut().accumulate_grads(&tape, &theta);
    let steps = config.horizon.saturating_sub(1);
    Ok(Batch {
        mean_mi: mi / (m * config.horizon) as f64,
        policy_kl: if steps == 0 { 0.0 } else { kl / (m * steps) as f64 },
    })
}

fn check_grads(policy: &Policy, est: &EmpowermentEstimator) -> Result<()> {
    for (name, norm) in [("policy", policy.store().grad_norm()), ("estimator", est.store().grad_norm())] {
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite {name} gradient")));
        }
    }
    Ok(())
}

/// Joint ascent of `β Σ Î − Σ KL(π ‖ π₀)` in the estimator parameters θ and
/// the policy parameters χ, with β following the configured schedule.
///
/// `initial` draws rollout start states. `coverage`, when given together
/// with `coverage_states > 0`, adds states at which only θ is trained so the
/// estimator stays accurate away from the policy's state distribution.
/// A non-finite objective or gradient stops training with a numeric error
/// before any parameter is touched in that epoch.
pub fn train_policy<R: Rng>(
    policy: &mut Policy,
    est: &mut EmpowermentEstimator,
    dynamics: &dyn Dynamics,
    initial: &mut StateSampler<'_, R>,
    mut coverage: Option<&mut StateSampler<'_, R>>,
    config: &TrainingConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(&PolicyTrainRecord, &Policy, &EmpowermentEstimator) -> Result<()>,
) -> Result<Vec<PolicyTrainRecord>> {
    config.validate()?;
    policy.check_compatible(dynamics)?;
    est.check_compatible(dynamics)?;
    if est.n_steps() != config.n_steps {
        return Err(Error::Config(format!(
            "training asks for {}-step empowerment but the estimator is {}-step",
            config.n_steps,
            est.n_steps()
        )));
    }
    if config.max_grad_norm.is_some() {
        policy.store_mut().set_max_grad_norm(config.max_grad_norm);
        est.store_mut().set_max_grad_norm(config.max_grad_norm);
    }
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let beta = config.beta.at(epoch);
        let batch = match config.update {
            UpdateMode::Joint => {
                let b = accumulate(policy, est, dynamics, initial, coverage.as_deref_mut(), config, beta, rng)?;
                check_grads(policy, est)?;
                est.store_mut().step(config.learning_rate_theta)?;
                policy.store_mut().step(config.learning_rate_chi)?;
                b
            }
            UpdateMode::Alternating => {
                let _ = accumulate(policy, est, dynamics, initial, coverage.as_deref_mut(), config, beta, rng)?;
                policy.store_mut().clear_grads();
                check_grads(policy, est)?;
                est.store_mut().step(config.learning_rate_theta)?;
                let b = accumulate(policy, est, dynamics, initial, None, config, beta, rng)?;
                est.store_mut().clear_grads();
                check_grads(policy, est)?;
                policy.store_mut().step(config.learning_rate_chi)?;
                b
            }
        };
        let record = PolicyTrainRecord {
            epoch,
            beta,
            mean_mi: batch.mean_mi,
            policy_kl: batch.policy_kl,
        };
        on_epoch(&record, policy, est)?;
        log.push(record);
    }
    Ok(log)
}

/// Writes `epoch,beta,mean_mi,policy_kl` rows.
pub fn write_policy_log(path: &Path, records: &[PolicyTrainRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["epoch", "beta", "mean_mi", "policy_kl"]).map_err(err)?;
    for r in records {
        w.write_record(&[
            r.epoch.to_string(),
            r.beta.to_string(),
            r.mean_mi.to_string(),
            r.policy_kl.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::empowerment::{EstimatorConfig, SourceConfig};
    use crate::envs::{BallConfig, EnvConfig};
    use crate::networks::{Activation, LayerSpec, UpdateRule};
    use crate::policy::BetaSchedule;
    use crate::rng::{stream_rng, uniform_in, Stream, StreamRng};

    fn hidden(width: usize) -> Vec<LayerSpec> {
        vec![LayerSpec {
            width,
            activation: Activation::Tanh,
        }]
    }

    fn ball_setup(seed: u64) -> (crate::envs::Env, EmpowermentEstimator, Policy) {
        let env = EnvConfig::Ball(BallConfig::default()).build().unwrap();
        let cfg = EstimatorConfig {
            source: SourceConfig::Learned { hidden: hidden(16) },
            planner_hidden: hidden(16),
            ..Default::default()
        };
        let est = EmpowermentEstimator::new(cfg, env.dynamics(), &mut stream_rng(seed, Stream::Init)).unwrap();
        let policy = Policy::new(hidden(16), UpdateRule::default(), env.dynamics(), &mut stream_rng(seed + 100, Stream::Init)).unwrap();
        (env, est, policy)
    }

    fn uniform_box(rng: &mut StreamRng, n: usize) -> Result<Vec<Vec<f64>>> {
        Ok((0..n).map(|_| uniform_in(rng, &[(-5.0, 5.0), (-5.0, 5.0)])).collect())
    }

    fn config(beta: f64, epochs: usize) -> TrainingConfig {
        TrainingConfig {
            horizon: 4,
            rollouts: 16,
            beta: BetaSchedule::constant(beta),
            epochs,
            learning_rate_theta: 3e-3,
            learning_rate_chi: 1e-2,
            policy_hidden: hidden(16),
            ..Default::default()
        }
    }

    #[test]
    fn zero_beta_collapses_the_policy_onto_its_prior() {
        let (env, mut est, mut policy) = ball_setup(1);
        let log = train_policy(
            &mut policy,
            &mut est,
            env.dynamics(),
            &mut uniform_box,
            None,
            &config(0.0, 300),
            &mut stream_rng(1, Stream::Rollout),
            |_, _, _| Ok(()),
        )
        .unwrap();
        let tail: f64 = log[280..].iter().map(|r| r.policy_kl).sum::<f64>() / 20.0;
        assert!(tail < 0.01, "KL per step {tail}");
    }

    #[test]
    fn metric_log_is_deterministic_and_written() {
        let run = || {
            let (env, mut est, mut policy) = ball_setup(2);
            let mut cover = uniform_box;
            let mut cfg = config(5.0, 12);
            cfg.coverage_states = 8;
            train_policy(
                &mut policy,
                &mut est,
                env.dynamics(),
                &mut uniform_box,
                Some(&mut cover),
                &cfg,
                &mut stream_rng(2, Stream::Rollout),
                |_, _, _| Ok(()),
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_policy_log(&path, &a).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,beta,mean_mi,policy_kl\n"));
        assert_eq!(text.lines().count(), 13);
    }

    #[test]
    fn alternating_updates_run_and_estimator_order_is_checked() {
        let (env, mut est, mut policy) = ball_setup(3);
        let mut cfg = config(5.0, 3);
        cfg.update = UpdateMode::Alternating;
        let log = train_policy(
            &mut policy,
            &mut est,
            env.dynamics(),
            &mut uniform_box,
            None,
            &cfg,
            &mut stream_rng(3, Stream::Rollout),
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert_eq!(log.len(), 3);
        cfg.n_steps = 2;
        let err = train_policy(
            &mut policy,
            &mut est,
            env.dynamics(),
            &mut uniform_box,
            None,
            &cfg,
            &mut stream_rng(3, Stream::Rollout),
            |_, _, _| Ok(()),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn estimator_checkpoint_is_reusable_across_horizons() {
        let (env, mut est, mut policy) = ball_setup(4);
        let cfg = config(5.0, 5);
        train_policy(&mut policy, &mut est, env.dynamics(), &mut uniform_box, None, &cfg, &mut stream_rng(4, Stream::Rollout), |_, _, _| Ok(()))
            .unwrap();
        let loaded = EmpowermentEstimator::from_checkpoint(&est.to_checkpoint().unwrap(), env.dynamics()).unwrap();
        let mut longer = cfg.clone();
        longer.horizon = 12;
        let mut est2 = loaded;
        let log = train_policy(&mut policy, &mut est2, env.dynamics(), &mut uniform_box, None, &longer, &mut stream_rng(5, Stream::Rollout), |_, _, _| Ok(()))
            .unwrap();
        assert!(log.iter().all(|r| r.mean_mi.is_finite()));
    }
}
