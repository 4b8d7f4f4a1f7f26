use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dvbf::{DvbfConfig, DvbfTrainConfig};
use crate::empowerment::{EstimatorConfig, GridSpec, SourceConfig, SourceTrainConfig};
use crate::envs::{BallConfig, EnvConfig, PendulumConfig};
use crate::error::{Error, Result};
use crate::networks::{Activation, LayerSpec, UpdateRule};
use crate::policy::{BetaSchedule, EvalConfig, TrainingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsMode {
    /// Differentiable environment equations.
    Analytic,
    /// Latent model fitted to a random-policy dataset.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeMode {
    /// One estimate of the bound per grid state.
    SingleStep,
    /// Bound summed along policy rollouts started at the grid state.
    Accumulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub episodes: usize,
    pub horizon: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            horizon: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    /// Defaults to the environment bounds at 41 × 41 points.
    pub grid: Option<GridSpec>,
    pub mode: LandscapeMode,
    /// Bound samples per grid state in single-step mode.
    pub samples: usize,
    /// Rollout length and count per grid state in accumulated mode.
    pub horizon: usize,
    pub rollouts: usize,
    /// Length of the trained-policy trajectory written next to the grid; 0 skips it.
    pub overlay_steps: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            grid: None,
            mode: LandscapeMode::SingleStep,
            samples: 400,
            horizon: 20,
            rollouts: 16,
            overlay_steps: 200,
        }
    }
}

/// Everything one experiment needs; every command derives its work from
/// this value and the seed alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dynamics: DynamicsMode,
    pub env: EnvConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub dvbf: DvbfConfig,
    #[serde(default)]
    pub dvbf_training: DvbfTrainConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub pretrain: SourceTrainConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub landscape: LandscapeConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    /// Settings as written.
    #[default]
    Full,
    /// Iteration counts, grids and evaluations capped for smoke runs.
    Ci,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "ci" => Ok(Profile::Ci),
            other => Err(Error::Config(format!("unknown profile {other:?}, expected full or ci"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Full => "full",
            Profile::Ci => "ci",
        })
    }
}

pub const PRESETS: [&str; 4] = ["pendulum", "pendulum-nstep", "ball", "ball-nstep"];

fn tanh(width: usize, layers: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec {
            width,
            activation: Activation::Tanh,
        };
        layers
    ]
}

fn layer(width: usize, activation: Activation) -> Vec<LayerSpec> {
    vec![LayerSpec { width, activation }]
}

impl ExperimentConfig {
    /// Built-in experiment definitions, listed in [`PRESETS`].
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "pendulum" => Ok(Self::pendulum(1)),
            "pendulum-nstep" => Ok(Self::pendulum(5)),
            "ball" => Ok(Self::ball(1)),
            "ball-nstep" => Ok(Self::ball(10)),
            other => Err(Error::Config(format!("unknown preset {other:?}, expected one of {PRESETS:?}"))),
        }
    }

    fn pendulum(n_steps: usize) -> Self {
        let hidden = tanh(128, 4);
        let name = if n_steps == 1 { "pendulum".to_string() } else { "pendulum-nstep".to_string() };
        Self {
            output_dir: PathBuf::from("runs").join(&name),
            name,
            seed: 1,
            dynamics: DynamicsMode::Analytic,
            env: EnvConfig::Pendulum(PendulumConfig::default()),
            data: DataConfig::default(),
            dvbf: DvbfConfig::default(),
            dvbf_training: DvbfTrainConfig::default(),
            estimator: EstimatorConfig {
                source: SourceConfig::Learned { hidden: hidden.clone() },
                planner_hidden: hidden.clone(),
                n_steps,
                update: UpdateRule::default(),
                max_grad_norm: None,
            },
            pretrain: SourceTrainConfig {
                iterations: 1000,
                states_per_batch: 64,
                samples_per_state: 4,
                learning_rate: 1e-3,
                ..SourceTrainConfig::default()
            },
            training: TrainingConfig {
                horizon: 20,
                rollouts: 32,
                beta: BetaSchedule {
                    start: 5.0,
                    end: 2000.0,
                    epochs: 800,
                },
                epochs: 800,
                n_steps,
                policy_hidden: hidden,
                coverage_states: 64,
                ..TrainingConfig::default()
            },
            landscape: LandscapeConfig {
                mode: LandscapeMode::Accumulated,
                ..LandscapeConfig::default()
            },
            eval: EvalConfig {
                episodes: 10,
                horizon: 500,
                ..EvalConfig::default()
            },
        }
    }

    fn ball(n_steps: usize) -> Self {
        let hidden = tanh(64, 1);
        let name = if n_steps == 1 { "ball".to_string() } else { "ball-nstep".to_string() };
        Self {
            output_dir: PathBuf::from("runs").join(&name),
            name,
            seed: 1,
            dynamics: DynamicsMode::Learned,
            env: EnvConfig::Ball(BallConfig::default()),
            data: DataConfig {
                episodes: 100,
                horizon: 50,
            },
            dvbf: DvbfConfig {
                latent_dim: 4,
                transition_hidden: layer(32, Activation::Sigmoid),
                measurement_hidden: layer(32, Activation::Relu),
                decoder_hidden: layer(32, Activation::Relu),
                initial_encoder_hidden: layer(32, Activation::Relu),
                initial_transform_hidden: layer(32, Activation::Tanh),
                ..DvbfConfig::default()
            },
            dvbf_training: DvbfTrainConfig {
                epochs: 100,
                batch_size: 16,
                ..DvbfTrainConfig::default()
            },
            estimator: EstimatorConfig {
                source: SourceConfig::Learned { hidden: hidden.clone() },
                planner_hidden: hidden.clone(),
                n_steps,
                update: UpdateRule::default(),
                max_grad_norm: None,
            },
            pretrain: SourceTrainConfig {
                iterations: 500,
                states_per_batch: 32,
                samples_per_state: 8,
                learning_rate: 1e-3,
                ..SourceTrainConfig::default()
            },
            training: TrainingConfig {
                horizon: 10,
                rollouts: 32,
                beta: BetaSchedule::constant(50.0),
                epochs: 300,
                n_steps,
                policy_hidden: hidden,
                coverage_states: 64,
                ..TrainingConfig::default()
            },
            landscape: LandscapeConfig {
                samples: 200,
                ..LandscapeConfig::default()
            },
            eval: EvalConfig {
                episodes: 10,
                horizon: 1000,
                ..EvalConfig::default()
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of the canonical serialized form without the output
    /// directory, hex encoded; it identifies what a run computes, not where
    /// the results go.
    pub fn hash(&self) -> Result<String> {
        let canonical = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        Ok(hex::encode(Sha256::digest(canonical.to_toml()?.as_bytes())))
    }

    /// Grid from the config, or the full environment bounds at 41 × 41.
    pub fn landscape_grid(&self) -> Result<GridSpec> {
        let bounds = self.env.build()?.grid_bounds();
        let grid = self.landscape.grid.clone().unwrap_or(GridSpec {
            dim1: [bounds[0].0, bounds[0].1],
            dim2: [bounds[1].0, bounds[1].1],
            points1: 41,
            points2: 41,
        });
        grid.validate(&bounds)?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("experiment name must not be empty".into()));
        }
        let env = self.env.build()?;
        if self.estimator.n_steps != self.training.n_steps {
            return Err(Error::Config(format!(
                "estimator.n_steps = {} but training.n_steps = {}; the policy accumulates the estimator's bound",
                self.estimator.n_steps, self.training.n_steps
            )));
        }
        self.training.validate()?;
        if self.data.episodes == 0 || self.data.horizon == 0 {
            return Err(Error::Validation("data.episodes and data.horizon must be ≥ 1".into()));
        }
        if self.dynamics == DynamicsMode::Learned && self.data.horizon + 1 < self.dvbf.init_window {
            return Err(Error::Validation(format!(
                "data.horizon + 1 = {} observations cannot fill the initial window of {}",
                self.data.horizon + 1,
                self.dvbf.init_window
            )));
        }
        if env.state_dim() != 2 {
            return Err(Error::Validation(format!(
                "experiments need a two-dimensional environment state, {} has {}",
                env.kind().as_str(),
                env.state_dim()
            )));
        }
        self.landscape_grid()?;
        let l = &self.landscape;
        if l.samples == 0 || l.horizon == 0 || l.rollouts == 0 {
            return Err(Error::Validation("landscape samples, horizon and rollouts must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Applies `--seed`, `--out` and `--profile` overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>, profile: Profile) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
        if profile == Profile::Ci {
            self.scale_down();
        }
        self.validate()?;
        Ok(self)
    }

    fn scale_down(&mut self) {
        let cap = |v: &mut usize, max: usize| *v = (*v).min(max);
        cap(&mut self.data.episodes, 20);
        cap(&mut self.dvbf_training.epochs, 5);
        cap(&mut self.pretrain.iterations, 50);
        cap(&mut self.training.epochs, 20);
        cap(&mut self.training.beta.epochs, 20);
        cap(&mut self.training.rollouts, 8);
        cap(&mut self.training.coverage_states, 16);
        let grid = self.landscape.grid.get_or_insert_with(|| {
            let bounds = self.env.build().map(|e| e.grid_bounds()).unwrap_or_default();
            let range = |i: usize| bounds.get(i).map(|&(lo, hi)| [lo, hi]).unwrap_or([0.0, 0.0]);
            GridSpec {
                dim1: range(0),
                dim2: range(1),
                points1: 41,
                points2: 41,
            }
        });
        cap(&mut grid.points1, 11);
        cap(&mut grid.points2, 11);
        cap(&mut self.landscape.samples, 64);
        cap(&mut self.landscape.rollouts, 4);
        cap(&mut self.landscape.overlay_steps, 50);
        cap(&mut self.eval.episodes, 2);
        cap(&mut self.eval.horizon, 100);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.name, name);
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg, "{name}");
            assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ExperimentConfig::preset("ball").unwrap().to_toml().unwrap();
        let typo = text.replace("[training.beta]", "[training.beta]\nstrat = 3.0");
        assert!(matches!(ExperimentConfig::from_toml(&typo), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_orders_are_rejected() {
        let mut cfg = ExperimentConfig::preset("pendulum").unwrap();
        cfg.training.n_steps = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grids_outside_the_bounds_are_rejected() {
        let mut cfg = ExperimentConfig::preset("ball").unwrap();
        cfg.landscape.grid = Some(GridSpec {
            dim1: [-6.0, 5.0],
            dim2: [-5.0, 5.0],
            points1: 3,
            points2: 3,
        });
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn overrides_change_the_hash() {
        let cfg = ExperimentConfig::preset("ball").unwrap();
        let h = cfg.hash().unwrap();
        let seeded = cfg.clone().with_overrides(Some(9), None, Profile::Full).unwrap();
        assert_eq!(seeded.seed, 9);
        assert_ne!(seeded.hash().unwrap(), h);
        let moved = cfg.clone().with_overrides(None, Some("elsewhere".into()), Profile::Full).unwrap();
        assert_eq!(moved.hash().unwrap(), h);
        let ci = cfg.with_overrides(None, Some("x".into()), Profile::Ci).unwrap();
        assert_eq!(ci.output_dir, PathBuf::from("x"));
        assert_eq!(ci.landscape.grid.as_ref().unwrap().points1, 11);
        assert!(ci.training.epochs <= 20);
        assert_eq!("ci".parse::<Profile>().unwrap(), Profile::Ci);
        assert!("fast".parse::<Profile>().is_err());
    }
}
