use std::path::Path;

use rand::Rng;

use super::{DynamicsMode, ExperimentConfig, LandscapeMode};
use crate::dvbf::{train_dynamics, DvbfModel, DvbfTrainRecord, LatentDynamics};
use crate::empowerment::{
    empowerment_landscape, train_source_planner, EmpowermentEstimator, Landscape, SourceTrainRecord,
};
use crate::envs::{generate_dataset, Dataset, Dynamics, Env};
use crate::error::{Error, Result};
use crate::policy::{
    accumulated_landscape, evaluate_policy, train_policy, Controller, EvalConfig, EvalReport, Policy, PolicyTrainRecord,
};
use crate::rng::{indexed_stream_rng, stream_rng, uniform_in, Stream, StreamRng};

/// Random-policy dataset for the configured environment.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let env = cfg.env.build()?;
    generate_dataset(&env, cfg.data.episodes, cfg.data.horizon, cfg.seed)
}

fn check_dataset(env: &Env, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    let h = &dataset.header;
    if h.env != env.kind() || h.obs_dim != env.obs_dim() || h.action_dim != env.action_dim() {
        return Err(Error::Validation(format!(
            "dataset holds {} with obs/action dims {}/{}, config selects {} with {}/{}",
            h.env.as_str(),
            h.obs_dim,
            h.action_dim,
            env.kind().as_str(),
            env.obs_dim(),
            env.action_dim()
        )));
    }
    Ok(())
}

/// Fits the latent model to `dataset` and calibrates its per-dimension step
/// scale on the filtered dataset states under uniform actions.
pub fn fit_dynamics(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(LatentDynamics, Vec<DvbfTrainRecord>)> {
    let env = cfg.env.build()?;
    check_dataset(&env, dataset)?;
    let (shift, scale) = dataset.observation_stats();
    let bound = env.dynamics().action_bound().map(<[f64]>::to_vec);
    let mut model = DvbfModel::new(
        cfg.dvbf.clone(),
        env.obs_dim(),
        env.action_dim(),
        bound,
        shift,
        scale,
        &mut stream_rng(cfg.seed, Stream::Init),
    )?;
    let mut rng = stream_rng(cfg.seed, Stream::Dynamics);
    let log = train_dynamics(&mut model, dataset, &cfg.dvbf_training, &mut rng)?;
    let latent = LatentDynamics::new(model);
    let pool = latent.encode_dataset(dataset)?;
    let actions: Vec<_> = pool.iter().map(|_| env.uniform_action(&mut rng)).collect();
    let delta = latent.measure_delta_scale(&pool, &actions)?;
    Ok((latent.with_delta_scale(delta)?, log))
}

/// The dynamics the agent trains against, with matching state samplers and
/// the map from interpretable grid coordinates to agent states.
pub struct Simulator {
    env: Env,
    learned: Option<Learned>,
}

struct Learned {
    latent: LatentDynamics,
    /// Filtered latent states along the dataset episodes.
    pool: Vec<Vec<f64>>,
}

impl Simulator {
    pub fn analytic(env: Env) -> Self {
        Self { env, learned: None }
    }

    pub fn learned(env: Env, latent: LatentDynamics, dataset: &Dataset) -> Result<Self> {
        check_dataset(&env, dataset)?;
        let m = latent.model();
        if m.obs_dim() != env.obs_dim() || m.action_dim() != env.action_dim() {
            return Err(Error::Validation(format!(
                "dynamics checkpoint has obs/action dims {}/{}, config environment has {}/{}",
                m.obs_dim(),
                m.action_dim(),
                env.obs_dim(),
                env.action_dim()
            )));
        }
        let pool = latent.encode_dataset(dataset)?;
        Ok(Self {
            env,
            learned: Some(Learned { latent, pool }),
        })
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn latent(&self) -> Option<&LatentDynamics> {
        self.learned.as_ref().map(|l| &l.latent)
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        match &self.learned {
            Some(l) => &l.latent,
            None => self.env.dynamics(),
        }
    }

    /// Rollout start states: the reset distribution, or filtered dataset states.
    pub fn initial_states(&self, rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
        match &self.learned {
            Some(l) => (0..n).map(|_| l.pool[rng.random_range(0..l.pool.len())].clone()).collect(),
            None => (0..n).map(|_| self.env.reset(rng)).collect(),
        }
    }

    /// States spread over the reachable region: uniform over the grid bounds,
    /// or filtered dataset states.
    pub fn coverage_states(&self, rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
        match &self.learned {
            Some(_) => self.initial_states(rng, n),
            None => {
                let bounds = self.env.grid_bounds();
                (0..n).map(|_| uniform_in(rng, &bounds)).collect()
            }
        }
    }

    /// Agent state for environment coordinates `point`.
    pub fn encode(&self, point: &[f64]) -> Result<Vec<f64>> {
        match &self.learned {
            Some(l) => l.latent.encode_stationary(&self.env.observation(point)),
            None => Ok(point.to_vec()),
        }
    }

    pub fn controller<'a>(&'a self, policy: &'a Policy) -> Controller<'a> {
        match &self.learned {
            Some(l) => Controller::Filtered {
                policy,
                latent: &l.latent,
            },
            None => Controller::Direct {
                policy,
                dynamics: self.env.dynamics(),
            },
        }
    }
}

/// Analytic simulator, or the learned one from a fitted model and its dataset.
pub fn simulator(cfg: &ExperimentConfig, learned: Option<(LatentDynamics, &Dataset)>) -> Result<Simulator> {
    let env = cfg.env.build()?;
    match (cfg.dynamics, learned) {
        (DynamicsMode::Analytic, _) => Ok(Simulator::analytic(env)),
        (DynamicsMode::Learned, Some((latent, dataset))) => {
            if latent.model().latent_dim() != cfg.dvbf.latent_dim {
                return Err(Error::Validation(format!(
                    "dynamics checkpoint has latent dim {}, config dvbf.latent_dim is {}",
                    latent.model().latent_dim(),
                    cfg.dvbf.latent_dim
                )));
            }
            Simulator::learned(env, latent, dataset)
        }
        (DynamicsMode::Learned, None) => Err(Error::Validation("learned dynamics mode needs a fitted dynamics model".into())),
    }
}

pub struct Agent {
    pub estimator: EmpowermentEstimator,
    pub policy: Policy,
}

pub fn init_agent(cfg: &ExperimentConfig, sim: &Simulator) -> Result<Agent> {
    let mut rng = indexed_stream_rng(cfg.seed, Stream::Init, 1);
    let d = sim.dynamics();
    let estimator = EmpowermentEstimator::new(cfg.estimator.clone(), d, &mut rng)?;
    let update = cfg.estimator.update;
    let policy = Policy::new(cfg.training.policy_hidden.clone(), update, d, &mut rng)?;
    Ok(Agent { estimator, policy })
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLogs {
    pub pretrain: Vec<SourceTrainRecord>,
    pub policy: Vec<PolicyTrainRecord>,
}

/// Pre-trains source and planner on coverage states, then runs the joint
/// policy/estimator ascent. On a numeric failure the agent keeps the
/// parameters of the last completed update.
pub fn train_agent(
    cfg: &ExperimentConfig,
    sim: &Simulator,
    agent: &mut Agent,
    mut on_epoch: impl FnMut(&PolicyTrainRecord),
) -> Result<TrainingLogs> {
    let d = sim.dynamics();
    let mut rng = stream_rng(cfg.seed, Stream::Rollout);
    let pretrain = if cfg.pretrain.iterations > 0 {
        let mut sampler = |rng: &mut StreamRng, n: usize| sim.coverage_states(rng, n);
        train_source_planner(&mut agent.estimator, d, &mut sampler, &cfg.pretrain, &mut rng)?
    } else {
        Vec::new()
    };
    let mut initial = |rng: &mut StreamRng, n: usize| -> Result<Vec<Vec<f64>>> { Ok(sim.initial_states(rng, n)) };
    let mut coverage = |rng: &mut StreamRng, n: usize| -> Result<Vec<Vec<f64>>> { Ok(sim.coverage_states(rng, n)) };
    let policy = train_policy(
        &mut agent.policy,
        &mut agent.estimator,
        d,
        &mut initial,
        Some(&mut coverage),
        &cfg.training,
        &mut rng,
        |rec, _, _| {
            on_epoch(rec);
            Ok(())
        },
    )?;
    Ok(TrainingLogs { pretrain, policy })
}

/// Landscape over the configured grid; accumulated mode needs the policy.
pub fn compute_landscape(
    cfg: &ExperimentConfig,
    sim: &Simulator,
    est: &EmpowermentEstimator,
    policy: Option<&Policy>,
) -> Result<Landscape> {
    let grid = cfg.landscape_grid()?;
    let encode = |p: &[f64]| sim.encode(p);
    let l = &cfg.landscape;
    match (l.mode, policy) {
        (LandscapeMode::SingleStep, _) => empowerment_landscape(est, sim.dynamics(), &grid, l.samples, &encode, cfg.seed),
        (LandscapeMode::Accumulated, Some(p)) => {
            accumulated_landscape(p, est, sim.dynamics(), &grid, l.horizon, l.rollouts, &encode, cfg.seed)
        }
        (LandscapeMode::Accumulated, None) => {
            Err(Error::Validation("accumulated landscapes need a trained policy".into()))
        }
    }
}

/// Coordinates of one trained-policy episode from the reset distribution.
pub fn overlay_trajectory(cfg: &ExperimentConfig, sim: &Simulator, policy: &Policy) -> Result<Vec<[f64; 2]>> {
    let ecfg = EvalConfig {
        episodes: 1,
        horizon: cfg.landscape.overlay_steps.max(1),
        ..cfg.eval.clone()
    };
    let mut rng = indexed_stream_rng(cfg.seed, Stream::Eval, 1);
    Ok(evaluate_policy(sim.env(), &sim.controller(policy), &ecfg, &mut rng)?.path)
}

/// Closed-loop evaluation on the true environment; `None` runs the uniform
/// baseline. Both share one evaluation noise stream.
pub fn evaluate(cfg: &ExperimentConfig, sim: &Simulator, policy: Option<&Policy>) -> Result<EvalReport> {
    let mut rng = stream_rng(cfg.seed, Stream::Eval);
    let controller = match policy {
        Some(p) => sim.controller(p),
        None => Controller::Uniform,
    };
    evaluate_policy(sim.env(), &controller, &cfg.eval, &mut rng)
}

/// Columns `step,dim1,dim2`.
pub fn write_trajectory_csv(path: &Path, points: &[[f64; 2]]) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["step", "dim1", "dim2"]).map_err(err)?;
    for (t, p) in points.iter().enumerate() {
        w.write_record(&[t.to_string(), p[0].to_string(), p[1].to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
