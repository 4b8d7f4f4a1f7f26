use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Policy;
use crate::dvbf::LatentDynamics;
use crate::envs::{wrap_angle, Dynamics, Env};
use crate::error::{Error, Result};
use crate::rng::standard_normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Controlled steps per episode (after any filter warm-up).
    pub horizon: usize,
    /// Sample from π instead of applying its mean action.
    pub stochastic: bool,
    pub histogram_bins: usize,
    /// Pendulum success: |θ from upright| below this angle ...
    pub upright_tolerance: f64,
    /// ... for this many consecutive steps.
    pub balance_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            horizon: 500,
            stochastic: false,
            histogram_bins: 20,
            upright_tolerance: 0.3,
            balance_steps: 100,
        }
    }
}

/// Who picks the actions during evaluation.
pub enum Controller<'a> {
    /// Uniform random actions within the bound.
    Uniform,
    /// π acting on the true environment state.
    Direct { policy: &'a Policy, dynamics: &'a dyn Dynamics },
    /// π acting on latent states filtered from observations.
    Filtered { policy: &'a Policy, latent: &'a LatentDynamics },
}

/// Visit counts on a regular 2-D grid; row-major with the first coordinate slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2d {
    pub edges1: Vec<f64>,
    pub edges2: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram2d {
    pub fn new(bounds: [(f64, f64); 2], bins: usize) -> Self {
        let edges = |(lo, hi): (f64, f64)| (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        Self {
            edges1: edges(bounds[0]),
            edges2: edges(bounds[1]),
            counts: vec![0; bins * bins],
        }
    }

    fn bin(edges: &[f64], x: f64) -> usize {
        let n = edges.len() - 1;
        let f = (x - edges[0]) / (edges[n] - edges[0]);
        ((f * n as f64).floor().max(0.0) as usize).min(n - 1)
    }

    pub fn add(&mut self, x: f64, y: f64) {
        let n2 = self.edges2.len() - 1;
        let i = Self::bin(&self.edges1, x);
        let j = Self::bin(&self.edges2, y);
        self.counts[i * n2 + j] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Columns `dim1_lo,dim1_hi,dim2_lo,dim2_hi,count,fraction`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["dim1_lo", "dim1_hi", "dim2_lo", "dim2_hi", "count", "fraction"])
            .map_err(err)?;
        let total = self.total().max(1) as f64;
        let n2 = self.edges2.len() - 1;
        for (k, &c) in self.counts.iter().enumerate() {
            let (i, j) = (k / n2, k % n2);
            w.write_record(&[
                self.edges1[i].to_string(),
                self.edges1[i + 1].to_string(),
                self.edges2[j].to_string(),
                self.edges2[j + 1].to_string(),
                c.to_string(),
                (c as f64 / total).to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
}

impl LatencyStats {
    fn from_micros(mut xs: Vec<f64>) -> Self {
        if xs.is_empty() {
            return Self {
                samples: 0,
                mean_us: 0.0,
                median_us: 0.0,
                p95_us: 0.0,
            };
        }
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        Self {
            samples: n,
            mean_us: xs.iter().sum::<f64>() / n as f64,
            median_us: xs[n / 2],
            p95_us: xs[((n as f64 * 0.95) as usize).min(n - 1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub steps: usize,
    /// Visited states (ball position, or wrapped angle and velocity).
    pub histogram: Histogram2d,
    pub mean_center_distance: f64,
    /// Ball only.
    pub mean_wall_distance: Option<f64>,
    /// Ball only: fraction of steps with some coordinate beyond 90% of the half side.
    pub outer_shell_mass: Option<f64>,
    /// Ball only: mean action component pointing away from the nearest wall,
    /// over steps that start within a tenth of the side from it.
    pub near_wall_inward_action: Option<f64>,
    /// Pendulum only: episodes that balanced upright for the required streak.
    pub swing_up_successes: Option<usize>,
    pub episodes: usize,
    /// Wall-clock time per control step (action choice plus filter update).
    pub latency: LatencyStats,
    /// Coordinates visited in the first episode, starting state included.
    pub path: Vec<[f64; 2]>,
}

impl EvalReport {
    /// Plain-text `key = value` lines.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        line("episodes", self.episodes.to_string());
        line("steps", self.steps.to_string());
        line("mean_center_distance", self.mean_center_distance.to_string());
        if let Some(v) = self.mean_wall_distance {
            line("mean_wall_distance", v.to_string());
        }
        if let Some(v) = self.outer_shell_mass {
            line("outer_shell_mass", v.to_string());
        }
        if let Some(v) = self.near_wall_inward_action {
            line("near_wall_inward_action", v.to_string());
        }
        if let Some(v) = self.swing_up_successes {
            line("swing_up_successes", v.to_string());
        }
        line("latency_mean_us", self.latency.mean_us.to_string());
        line("latency_median_us", self.latency.median_us.to_string());
        line("latency_p95_us", self.latency.p95_us.to_string());
        out
    }
}

struct Filter<'a> {
    latent: &'a LatentDynamics,
    belief: crate::dvbf::LatentBelief,
}

/// Runs `controller` on the true environment and collects visitation,
/// distance, swing-up and latency statistics.
///
/// Filtered controllers first apply zero actions for K − 1 steps so the
/// initial-state encoder sees K observations; those steps are not scored.
pub fn evaluate_policy(env: &Env, controller: &Controller<'_>, config: &EvalConfig, rng: &mut impl Rng) -> Result<EvalReport> {
    if config.episodes == 0 || config.horizon == 0 || config.histogram_bins == 0 {
        return Err(Error::Validation("evaluation needs episodes, horizon and bins ≥ 1".into()));
    }
    if env.state_dim() != 2 {
        return Err(Error::Unsupported(format!(
            "evaluation reports need a two-dimensional state, {} has {}",
            env.kind().as_str(),
            env.state_dim()
        )));
    }
    match controller {
        Controller::Direct { policy, dynamics } => policy.check_compatible(*dynamics)?,
        Controller::Filtered { policy, latent } => {
            policy.check_compatible(*latent)?;
            let m = latent.model();
            if m.obs_dim() != env.obs_dim() || m.action_dim() != env.action_dim() {
                return Err(Error::Validation(format!(
                    "dynamics model expects obs/action dims {}/{}, environment has {}/{}",
                    m.obs_dim(),
                    m.action_dim(),
                    env.obs_dim(),
                    env.action_dim()
                )));
            }
        }
        Controller::Uniform => {}
    }
    let bounds = env.grid_bounds();
    let mut histogram = Histogram2d::new([bounds[0], bounds[1]], config.histogram_bins);
    let ball = match env {
        Env::Ball(b) => Some(b),
        _ => None,
    };
    let pendulum = matches!(env, Env::Pendulum(_));
    let da = env.action_dim();

    let (mut center_sum, mut wall_sum, mut shell) = (0.0, 0.0, 0usize);
    let (mut inward_sum, mut inward_n) = (0.0, 0usize);
    let mut successes = 0;
    let mut latencies = Vec::with_capacity(config.episodes * config.horizon);
    let mut steps = 0;
    let mut path = Vec::with_capacity(config.horizon + 1);
    let coords = |s: &[f64]| if pendulum { [wrap_angle(s[0]), s[1]] } else { [s[0], s[1]] };

    for episode in 0..config.episodes {
        let mut state = env.reset(rng);
        let mut filter = match controller {
            Controller::Filtered { latent, .. } => {
                let k = latent.model().config().init_window;
                let zero = vec![0.0; da];
                let mut obs = vec![env.observe(&state, rng)];
                for _ in 1..k {
                    let noise = env.sample_noise(rng);
                    state = env.step_values(&state, &zero, &noise);
                    obs.push(env.observe(&state, rng));
                }
                let model = latent.model();
                let zeros = vec![0.0; model.latent_dim()];
                let mut belief = model.initial_belief(&obs, None)?;
                for x in &obs[1..] {
                    belief = model.filter_step(&belief, &zero, x, &zeros)?;
                }
                Some(Filter { latent, belief })
            }
            _ => None,
        };
        if episode == 0 {
            path.push(coords(&state));
        }
        let mut streak = 0usize;
        let mut balanced = false;
        for _ in 0..config.horizon {
            let eps = config.stochastic.then(|| standard_normal(rng, da));
            let started = Instant::now();
            let action = match controller {
                Controller::Uniform => env.uniform_action(rng),
                Controller::Direct { policy, dynamics } => policy.act_values(*dynamics, &state, eps.as_deref())?,
                Controller::Filtered { policy, latent } => {
                    let f = filter.as_ref().expect("filtered controller keeps a belief");
                    policy.act_values(*latent, &f.belief.z, eps.as_deref())?
                }
            };
            let mut spent = started.elapsed();
            let noise = env.sample_noise(rng);
            let next = env.step_values(&state, &action, &noise);
            if let Some(f) = filter.as_mut() {
                let obs = env.observe(&next, rng);
                let model = f.latent.model();
                let zeros = vec![0.0; model.latent_dim()];
                let started = Instant::now();
                f.belief = model.filter_step(&f.belief, &action, &obs, &zeros)?;
                spent += started.elapsed();
            }
            latencies.push(spent.as_secs_f64() * 1e6);

            if let Some(b) = ball {
                let h = b.half_side();
                let dist = b.wall_distance(&state);
                if dist < 0.1 * 2.0 * h {
                    let (i, _) = state
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                        .expect("two coordinates");
                    inward_sum += -state[i].signum() * action[i];
                    inward_n += 1;
                }
            }
            state = next;
            steps += 1;
            let [c1, c2] = coords(&state);
            if episode == 0 {
                path.push([c1, c2]);
            }
            histogram.add(c1, c2);
            center_sum += (c1 * c1 + c2 * c2).sqrt();
            if let Some(b) = ball {
                let h = b.half_side();
                wall_sum += b.wall_distance(&state);
                if state.iter().any(|p| p.abs() > 0.9 * h) {
                    shell += 1;
                }
            }
            if pendulum {
                if wrap_angle(state[0]).abs() < config.upright_tolerance {
                    streak += 1;
                    if streak >= config.balance_steps {
                        balanced = true;
                    }
                } else {
                    streak = 0;
                }
            }
        }
        if balanced {
            successes += 1;
        }
    }
    let n = steps as f64;
    Ok(EvalReport {
        steps,
        histogram,
        mean_center_distance: center_sum / n,
        mean_wall_distance: ball.map(|_| wall_sum / n),
        outer_shell_mass: ball.map(|_| shell as f64 / n),
        near_wall_inward_action: ball.and_then(|_| (inward_n > 0).then(|| inward_sum / inward_n as f64)),
        swing_up_successes: pendulum.then_some(successes),
        episodes: config.episodes,
        latency: LatencyStats::from_micros(latencies),
        path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{BallConfig, EnvConfig, PendulumConfig};
    use crate::networks::{Activation, LayerSpec, UpdateRule};
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn uniform_policy_sticks_to_the_walls() {
        let env = EnvConfig::Ball(BallConfig::default()).build().unwrap();
        let cfg = EvalConfig {
            episodes: 10,
            horizon: 1000,
            ..Default::default()
        };
        let r = evaluate_policy(&env, &Controller::Uniform, &cfg, &mut stream_rng(1, Stream::Eval)).unwrap();
        assert_eq!(r.steps, 10_000);
        assert_eq!(r.histogram.total(), 10_000);
        assert_eq!(r.path.len(), 1001);
        // the shell covers 19% of the box area; wall absorption inflates its mass
        assert!(r.outer_shell_mass.unwrap() > 1.2 * 0.19, "{r:?}");
        assert!(r.swing_up_successes.is_none());
    }

    #[test]
    fn histogram_bins_cover_the_bounds() {
        let mut h = Histogram2d::new([(-1.0, 1.0), (0.0, 4.0)], 4);
        h.add(-1.0, 0.0);
        h.add(1.0, 4.0);
        h.add(0.1, 1.5);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[15], 1);
        assert_eq!(h.counts[2 * 4 + 1], 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        h.write_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 17);
    }

    #[test]
    fn untrained_pendulum_policy_reports_swing_up_and_latency() {
        let env = EnvConfig::Pendulum(PendulumConfig::default()).build().unwrap();
        let hidden = vec![LayerSpec {
            width: 8,
            activation: Activation::Tanh,
        }];
        let policy = Policy::new(hidden, UpdateRule::default(), env.dynamics(), &mut stream_rng(1, Stream::Init)).unwrap();
        let cfg = EvalConfig {
            episodes: 2,
            horizon: 50,
            ..Default::default()
        };
        let c = Controller::Direct {
            policy: &policy,
            dynamics: env.dynamics(),
        };
        let r = evaluate_policy(&env, &c, &cfg, &mut stream_rng(2, Stream::Eval)).unwrap();
        assert_eq!(r.swing_up_successes, Some(0));
        assert_eq!(r.latency.samples, 100);
        assert!(r.latency.mean_us > 0.0);
        assert!(r.summary().contains("swing_up_successes = 0"));
    }
}
