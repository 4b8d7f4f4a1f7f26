//! Self-contained verification suites on synthetic channels and toy models.
//!
//! Every check compares a measured value with an independent reference: tape
//! gradients against central differences, trained bounds against closed-form
//! Gaussian capacities, and continuous estimates against Blahut–Arimoto on a
//! quantized channel.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_check, finite_difference_check_coords, Tape, Var};
use crate::distributions::{squash, squash_log_det, DiagonalGaussian};
use crate::dvbf::{DvbfConfig, DvbfModel, ElboNoise, SequenceBatch};
use crate::empowerment::{
    additive_channel_matrix, discrete_mi_oracle, train_source_planner, EmpowermentEstimator, EstimatorConfig, SourceConfig,
    SourceTrainConfig,
};
use crate::envs::{BallConfig, EnvConfig, Episode, LinearGaussianConfig, PendulumConfig};
use crate::error::{Error, Result};
use crate::networks::{Activation, LayerSpec, UpdateRule};
use crate::policy::{objective, rollout, Policy, RolloutNoise};
use crate::rng::{indexed_stream_rng, stream_rng, Stream, StreamRng};

/// Tolerance for single differentiable operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for composite objectives evaluated with common random noise.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub expected: f64,
    /// Monte-Carlo standard error of `measured`, when it is an average.
    pub stderr: Option<f64>,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: measured {:.6e}, expected {:.6e} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.expected,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Planner training iterations for each linear-Gaussian capacity check.
    pub capacity_iterations: usize,
    pub capacity_ratios: Vec<f64>,
    /// Monte-Carlo samples behind every reported bound (N).
    pub samples: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            capacity_iterations: 1500,
            capacity_ratios: vec![0.5, 1.0, 2.0],
            samples: 10_000,
        }
    }
}

fn tanh_hidden(width: usize) -> Vec<LayerSpec> {
    vec![LayerSpec {
        width,
        activation: Activation::Tanh,
    }]
}

fn grad_outcome(name: &str, err: f64, tolerance: f64) -> CheckOutcome {
    CheckOutcome {
        name: format!("gradient {name}"),
        passed: err < tolerance,
        measured: err,
        expected: tolerance,
        stderr: None,
        detail: "max relative error vs central differences".into(),
    }
}

/// Weighted sum so that every output coordinate carries a distinct gradient.
fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let n = t.value(y).len();
    let shape = t.shape(y).to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 7 + 3) % 11) as f64 / 11.0).collect();
    let w = t.constant(w, &shape)?;
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type OpFn = fn(&mut Tape, Var) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, OpFn, Vec<f64>)> {
    let x6 = vec![0.3, -0.7, 1.1, 0.45, -1.3, 0.8];
    let pos6 = vec![0.3, 0.7, 1.1, 0.45, 1.3, 0.8];
    vec![
        ("matmul", |t, x| {
            let a = t.reshape(x, &[2, 3])?;
            let b = t.constant(vec![0.5, -1.0, 0.2, 0.3, 0.9, -0.4], &[3, 2])?;
            let y = t.matmul(a, b)?;
            weighted_sum(t, y)
        }, x6.clone()),
        ("matmul_rhs", |t, x| {
            let a = t.constant(vec![0.5, -1.0, 0.2, 0.3, 0.9, -0.4], &[2, 3])?;
            let b = t.reshape(x, &[3, 2])?;
            let y = t.matmul(a, b)?;
            weighted_sum(t, y)
        }, x6.clone()),
        ("add_broadcast", |t, x| {
            let a = t.reshape(x, &[2, 3])?;
            let b = t.slice(x, 0, 3)?;
            let y = t.add(a, b)?;
            weighted_sum(t, y)
        }, x6.clone()),
        ("sub", |t, x| {
            let a = t.slice(x, 0, 3)?;
            let b = t.slice(x, 3, 3)?;
            let y = t.sub(a, b)?;
            weighted_sum(t, y)
        }, x6.clone()),
        ("mul", |t, x| {
            let a = t.slice(x, 0, 3)?;
            let b = t.slice(x, 3, 3)?;
            let y = t.mul(a, b)?;
            weighted_sum(t, y)
        }, x6.clone()),
        ("div", |t, x| {
            let a = t.slice(x, 0, 3)?;
            let b = t.slice(x, 3, 3)?;
            let y = t.div(a, b)?;
            weighted_sum(t, y)
        }, pos6.clone()),
        ("neg", |t, x| {
            let y = t.neg(x);
            weighted_sum(t, y)
        }, x6.clone()),
        ("tanh", |t, x| {
            let y = t.tanh(x);
            weighted_sum(t, y)
        }, x6.clone()),
        ("exp", |t, x| {
            let y = t.exp(x);
            weighted_sum(t, y)
        }, x6.clone()),
        ("ln", |t, x| {
            let y = t.ln(x)?;
            weighted_sum(t, y)
        }, pos6.clone()),
        ("square", |t, x| {
            let y = t.square(x);
            weighted_sum(t, y)
        }, x6.clone()),
        ("sqrt", |t, x| {
            let y = t.sqrt(x)?;
            weighted_sum(t, y)
        }, pos6.clone()),
        ("sin", |t, x| {
            let y = t.sin(x);
            weighted_sum(t, y)
        }, x6.clone()),
        ("cos", |t, x| {
            let y = t.cos(x);
            weighted_sum(t, y)
        }, x6.clone()),
        ("relu", |t, x| {
            let y = t.relu(x);
            weighted_sum(t, y)
        }, x6.clone()),
        ("sigmoid", |t, x| {
            let y = t.sigmoid(x);
            weighted_sum(t, y)
        }, x6.clone()),
        ("clamp", |t, x| {
            let y = t.clamp(x, -1.0, 1.0);
            weighted_sum(t, y)
        }, x6.clone()),
        ("scale", |t, x| {
            let y = t.scale(x, -2.5);
            weighted_sum(t, y)
        }, x6.clone()),
        ("offset", |t, x| {
            let y = t.offset(x, 0.7);
            let y = t.square(y);
            weighted_sum(t, y)
        }, x6.clone()),
        ("sum", |t, x| {
            let s = t.sum(x);
            Ok(t.square(s))
        }, x6.clone()),
        ("mean", |t, x| {
            let s = t.mean(x);
            Ok(t.square(s))
        }, x6.clone()),
        ("sum_last", |t, x| {
            let m = t.reshape(x, &[3, 2])?;
            let y = t.sum_last(m);
            let y = t.square(y);
            weighted_sum(t, y)
        }, x6.clone()),
        ("concat", |t, x| {
            let m = t.reshape(x, &[2, 3])?;
            let a = t.slice(m, 0, 1)?;
            let y = t.concat(&[m, a])?;
            let y = t.square(y);
            weighted_sum(t, y)
        }, x6.clone()),
        ("concat_rows", |t, x| {
            let m = t.reshape(x, &[3, 2])?;
            let r = t.slice_rows(m, 1, 2)?;
            let y = t.concat_rows(&[m, r])?;
            let y = t.square(y);
            weighted_sum(t, y)
        }, x6.clone()),
        ("slice", |t, x| {
            let m = t.reshape(x, &[2, 3])?;
            let y = t.slice(m, 1, 2)?;
            let y = t.square(y);
            weighted_sum(t, y)
        }, x6.clone()),
        ("slice_rows", |t, x| {
            let m = t.reshape(x, &[3, 2])?;
            let y = t.slice_rows(m, 1, 1)?;
            let y = t.square(y);
            weighted_sum(t, y)
        }, x6.clone()),
        ("reshape", |t, x| {
            let y = t.reshape(x, &[3, 2])?;
            let y = t.exp(y);
            weighted_sum(t, y)
        }, x6),
    ]
}

/// Central-difference checks of every tape operation.
pub fn gradient_ops() -> Result<Vec<CheckOutcome>> {
    op_cases()
        .into_iter()
        .map(|(name, f, x)| Ok(grad_outcome(name, finite_difference_check(f, &x, 1e-6)?, OP_TOLERANCE)))
        .collect()
}

fn distribution_checks() -> Result<Vec<CheckOutcome>> {
    let x = vec![0.2, -0.4, 0.6, 0.9, 0.3, -0.8];
    let log_prob = finite_difference_check(
        |t: &mut Tape, v: Var| -> Result<Var> {
            let mean = t.slice(v, 0, 2)?;
            let ls = t.slice(v, 2, 2)?;
            let std = t.exp(ls);
            let at = t.slice(v, 4, 2)?;
            let d = DiagonalGaussian::new(t, mean, std)?;
            let lp = d.log_prob(t, at)?;
            let kl = d.kl_to_standard_normal(t)?;
            let both = t.add(lp, kl)?;
            Ok(t.sum(both))
        },
        &x,
        1e-6,
    )?;
    let squashed = finite_difference_check(
        |t: &mut Tape, v: Var| -> Result<Var> {
            let pre = t.reshape(v, &[3, 2])?;
            let a = squash(t, pre, &[2.0, 0.5])?.action;
            let ld = squash_log_det(t, pre, &[2.0, 0.5])?;
            let s = weighted_sum(t, a)?;
            let l = t.sum(ld);
            Ok(t.add(s, l)?)
        },
        &x,
        1e-6,
    )?;
    Ok(vec![
        grad_outcome("gaussian log_prob + kl", log_prob, COMPOSITE_TOLERANCE),
        grad_outcome("tanh squash + log det", squashed, COMPOSITE_TOLERANCE),
    ])
}

fn elbo_check(seed: u64) -> Result<CheckOutcome> {
    let h = |a| {
        vec![LayerSpec {
            width: 4,
            activation: a,
        }]
    };
    let cfg = DvbfConfig {
        latent_dim: 2,
        init_window: 2,
        transition_hidden: h(Activation::Sigmoid),
        measurement_hidden: h(Activation::Relu),
        decoder_hidden: h(Activation::Relu),
        initial_encoder_hidden: h(Activation::Relu),
        initial_transform_hidden: h(Activation::Tanh),
        ..Default::default()
    };
    let model = DvbfModel::new(cfg, 2, 1, Some(vec![1.0]), vec![0.1, 0.0], vec![0.5, 1.0], &mut stream_rng(seed, Stream::Init))?;
    let ep = |o: f64| Episode {
        observations: vec![vec![o, 0.1], vec![o + 0.2, 0.0], vec![o + 0.5, -0.2], vec![o + 0.4, -0.1]],
        actions: vec![vec![0.3], vec![-0.4], vec![0.1]],
    };
    let (a, b) = (ep(0.1), ep(-0.5));
    let batch = SequenceBatch::from_episodes(&[&a, &b])?;
    let noise = ElboNoise::sample(&mut stream_rng(seed, Stream::Dynamics), 2, batch.len(), 2);
    let x = model.store().flat_values();
    let coords: Vec<usize> = (0..x.len()).collect();
    let check = finite_difference_check_coords(
        |t: &mut Tape, v: Var| -> Result<Var> {
            let p = model.store().bind_flat(t, v)?;
            let parts = model.elbo(t, &p, &batch, &noise)?;
            Ok(t.sum(parts.elbo))
        },
        &x,
        1e-6,
        &coords,
    )?;
    Ok(grad_outcome("dvbf elbo (all parameters)", check.max_rel_error, COMPOSITE_TOLERANCE))
}

fn small_estimator(dynamics: &dyn crate::envs::Dynamics, n_steps: usize, seed: u64) -> Result<EmpowermentEstimator> {
    let cfg = EstimatorConfig {
        source: SourceConfig::Learned { hidden: tanh_hidden(6) },
        planner_hidden: tanh_hidden(6),
        n_steps,
        ..Default::default()
    };
    EmpowermentEstimator::new(cfg, dynamics, &mut stream_rng(seed, Stream::Init))
}

fn mi_bound_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (name, env, states, n) in [
        ("mi bound, pendulum, n=1", EnvConfig::Pendulum(PendulumConfig::default()), vec![0.4, 1.0, 2.8, -3.0], 1),
        ("mi bound, ball, n=1", EnvConfig::Ball(BallConfig::default()), vec![1.0, -2.0, 3.0, 0.5], 1),
        ("mi bound, pendulum, n=3", EnvConfig::Pendulum(PendulumConfig::default()), vec![0.4, 1.0, 2.8, -3.0], 3),
    ] {
        let env = env.build()?;
        let d = env.dynamics();
        let est = small_estimator(d, n, seed)?;
        let noise = est.sample_noise(&mut stream_rng(seed, Stream::MonteCarlo), 2);
        let x = est.store().flat_values();
        let coords: Vec<usize> = (0..x.len()).collect();
        let check = finite_difference_check_coords(
            |t: &mut Tape, v: Var| -> Result<Var> {
                let theta = est.store().bind_flat(t, v)?;
                let ctx = d.prepare(t)?;
                let s = t.constant(states.clone(), &[2, 2])?;
                let samples = est.bound_samples(t, &theta, d, &ctx, s, &noise)?;
                Ok(t.sum(samples))
            },
            &x,
            1e-6,
            &coords,
        )?;
        out.push(grad_outcome(name, check.max_rel_error, COMPOSITE_TOLERANCE));
    }
    Ok(out)
}

fn objective_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let env = EnvConfig::Pendulum(PendulumConfig::default()).build()?;
    let d = env.dynamics();
    let est = small_estimator(d, 1, seed)?;
    let policy = Policy::new(tanh_hidden(5), UpdateRule::default(), d, &mut stream_rng(seed + 1, Stream::Init))?;
    let noise = RolloutNoise::sample(&mut stream_rng(seed, Stream::Rollout), &est, d, 2, 3);
    let starts = vec![2.5, 0.3, -1.0, 1.0];
    let chi_x = policy.store().flat_values();
    let chi = finite_difference_check_coords(
        |t: &mut Tape, v: Var| -> Result<Var> {
            let chi = policy.store().bind_flat(t, v)?;
            let theta = est.bind(t, false)?;
            let ctx = d.prepare(t)?;
            let s0 = t.constant(starts.clone(), &[2, 2])?;
            let r = rollout(t, &policy, &chi, &est, &theta, d, &ctx, s0, &noise)?;
            Ok(objective(t, &r, 5.0)?.value)
        },
        &chi_x,
        1e-6,
        &(0..chi_x.len()).collect::<Vec<_>>(),
    )?;
    let theta_x = est.store().flat_values();
    let theta = finite_difference_check_coords(
        |t: &mut Tape, v: Var| -> Result<Var> {
            let chi = policy.bind(t, false)?;
            let theta = est.store().bind_flat(t, v)?;
            let ctx = d.prepare(t)?;
            let s0 = t.constant(starts.clone(), &[2, 2])?;
            let r = rollout(t, &policy, &chi, &est, &theta, d, &ctx, s0, &noise)?;
            Ok(objective(t, &r, 5.0)?.value)
        },
        &theta_x,
        1e-6,
        &(0..theta_x.len()).collect::<Vec<_>>(),
    )?;
    Ok(vec![
        grad_outcome("policy objective in χ (T=3, M=2)", chi.max_rel_error, COMPOSITE_TOLERANCE),
        grad_outcome("policy objective in θ (T=3, M=2)", theta.max_rel_error, COMPOSITE_TOLERANCE),
    ])
}

/// Every operation plus the composite objectives (distributions, ELBO, MI
/// bound, policy objective), each against central differences.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = gradient_ops()?;
    out.extend(distribution_checks()?);
    out.push(elbo_check(seed)?);
    out.extend(mi_bound_checks(seed)?);
    out.extend(objective_checks(seed)?);
    Ok(out)
}

fn linear_channel(noise_std: f64, u_max: Option<f64>) -> Result<crate::envs::Env> {
    EnvConfig::LinearGaussian(LinearGaussianConfig {
        dim: 1,
        noise_std,
        u_max,
    })
    .build()
}

fn train_planner(est: &mut EmpowermentEstimator, env: &crate::envs::Env, iterations: usize, train_source: bool, rng: &mut StreamRng) -> Result<()> {
    let cfg = SourceTrainConfig {
        iterations,
        states_per_batch: 16,
        samples_per_state: 32,
        learning_rate: 3e-3,
        train_source,
        train_planner: true,
    };
    let mut sampler = |rng: &mut StreamRng, n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| vec![rng.random_range(-2.0..2.0)]).collect() };
    train_source_planner(est, env.dynamics(), &mut sampler, &cfg, rng)?;
    Ok(())
}

/// Trains the planner against a fixed Gaussian source of std `ratio · σ_ε`
/// and compares the bound with `½ ln(1 + ratio²)`.
pub fn linear_gaussian_capacity(ratio: f64, config: &VerifyConfig) -> Result<CheckOutcome> {
    let env = linear_channel(1.0, None)?;
    let est_cfg = EstimatorConfig {
        source: SourceConfig::Fixed {
            mean: vec![0.0],
            std: vec![ratio],
        },
        planner_hidden: tanh_hidden(32),
        ..Default::default()
    };
    let index = (ratio * 1000.0).round() as u64;
    let mut est = EmpowermentEstimator::new(est_cfg, env.dynamics(), &mut indexed_stream_rng(config.seed, Stream::Init, index))?;
    let mut rng = indexed_stream_rng(config.seed, Stream::MonteCarlo, index);
    train_planner(&mut est, &env, config.capacity_iterations, false, &mut rng)?;
    let e = est.estimate_empowerment(env.dynamics(), &[0.0], config.samples, &mut rng)?;
    let analytic = 0.5 * (1.0 + ratio * ratio).ln();
    let se = e.stderr.unwrap_or(0.0);
    let within = (e.mean - analytic).abs() < 0.05;
    let below = e.mean <= analytic + 3.0 * se;
    Ok(CheckOutcome {
        name: format!("linear-gaussian capacity σ_ω/σ_ε = {ratio}"),
        passed: within && below,
        measured: e.mean,
        expected: analytic,
        stderr: Some(se),
        detail: format!("stderr {se:.2e}; needs |Î − C| < 0.05 and Î ≤ C + 3 se"),
    })
}

/// Measured `Î + gap` against the analytic MI on the linear-Gaussian channel
/// with a partially trained planner.
pub fn gap_identity(config: &VerifyConfig) -> Result<CheckOutcome> {
    let env = linear_channel(0.5, None)?;
    let est_cfg = EstimatorConfig {
        source: SourceConfig::Learned { hidden: tanh_hidden(8) },
        planner_hidden: tanh_hidden(8),
        ..Default::default()
    };
    let mut est = EmpowermentEstimator::new(est_cfg, env.dynamics(), &mut indexed_stream_rng(config.seed, Stream::Init, 7))?;
    let mut rng = indexed_stream_rng(config.seed, Stream::MonteCarlo, 7);
    train_planner(&mut est, &env, 100, true, &mut rng)?;
    let g = est.gap_estimate_linear_gaussian(env.dynamics(), &[0.3], config.samples, &mut rng)?;
    let se = g.total.stderr.unwrap_or(0.0);
    Ok(CheckOutcome {
        name: "gap identity".into(),
        passed: (g.total.mean - g.analytic_mi).abs() <= 3.0 * se,
        measured: g.total.mean,
        expected: g.analytic_mi,
        stderr: Some(se),
        detail: format!("Î {:.4} + gap {:.4}, stderr {se:.2e}, N = {}", g.bound.mean, g.gap.mean, config.samples),
    })
}

/// Blahut–Arimoto on BSC(0.1) against `ln 2 − H(0.1)`.
pub fn bsc_capacity() -> Result<CheckOutcome> {
    let p: f64 = 0.1;
    let ch = vec![vec![1.0 - p, p], vec![p, 1.0 - p]];
    let c = discrete_mi_oracle(&ch, 1e-12)?;
    let closed = 2f64.ln() + p * p.ln() + (1.0 - p) * (1.0 - p).ln();
    Ok(CheckOutcome {
        name: "blahut-arimoto BSC(0.1)".into(),
        passed: (c.capacity - closed).abs() <= 1e-6,
        measured: c.capacity,
        expected: closed,
        stderr: None,
        detail: format!("{} iterations; needs |C − (ln 2 − H(0.1))| ≤ 1e-6", c.iterations),
    })
}

/// Learned bound on `y = a + σ ε` with `|a| ≤ 1`, against the capacity of a
/// finely quantized version of the same channel.
pub fn discretized_channel(config: &VerifyConfig) -> Result<CheckOutcome> {
    let (u_max, sigma) = (1.0, 0.5);
    let env = linear_channel(sigma, Some(u_max))?;
    let actions: Vec<f64> = (0..=80).map(|i| -u_max + 2.0 * u_max * i as f64 / 80.0).collect();
    let edges: Vec<f64> = (0..=400).map(|i| -4.0 + 8.0 * i as f64 / 400.0).collect();
    let oracle = discrete_mi_oracle(&additive_channel_matrix(&actions, &edges, sigma)?, 1e-8)?;
    let est_cfg = EstimatorConfig {
        source: SourceConfig::Learned { hidden: tanh_hidden(16) },
        planner_hidden: tanh_hidden(32),
        ..Default::default()
    };
    let mut est = EmpowermentEstimator::new(est_cfg, env.dynamics(), &mut indexed_stream_rng(config.seed, Stream::Init, 11))?;
    let mut rng = indexed_stream_rng(config.seed, Stream::MonteCarlo, 11);
    train_planner(&mut est, &env, config.capacity_iterations, true, &mut rng)?;
    let e = est.estimate_empowerment(env.dynamics(), &[0.0], config.samples, &mut rng)?;
    let se = e.stderr.unwrap_or(0.0);
    Ok(CheckOutcome {
        name: "discretized channel bound".into(),
        passed: e.mean <= oracle.capacity + 3.0 * se,
        measured: e.mean,
        expected: oracle.capacity,
        stderr: Some(se),
        detail: format!("stderr {se:.2e}; needs Î ≤ C_oracle + 3 se"),
    })
}

/// All suites; an error inside a suite is reported as a failed check.
pub fn run_all(config: &VerifyConfig) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<Vec<CheckOutcome>>| match r {
        Ok(v) => out.extend(v),
        Err(e) => out.push(CheckOutcome {
            name: name.into(),
            passed: false,
            measured: f64::NAN,
            expected: f64::NAN,
            stderr: None,
            detail: e.to_string(),
        }),
    };
    let started = Instant::now();
    push("gradient suite", gradient_suite(config.seed));
    let secs = started.elapsed().as_secs_f64();
    push(
        "gradient suite runtime",
        Ok(vec![CheckOutcome {
            name: "gradient suite runtime (s)".into(),
            passed: secs < 30.0,
            measured: secs,
            expected: 30.0,
            stderr: None,
            detail: "wall-clock seconds".into(),
        }]),
    );
    for &r in &config.capacity_ratios {
        push("linear-gaussian capacity", linear_gaussian_capacity(r, config).map(|c| vec![c]));
    }
    push("gap identity", gap_identity(config).map(|c| vec![c]));
    push("blahut-arimoto BSC(0.1)", bsc_capacity().map(|c| vec![c]));
    push("discretized channel bound", discretized_channel(config).map(|c| vec![c]));
    out
}

/// Columns `name,passed,measured,expected,detail`.
pub fn write_report_csv(path: &Path, outcomes: &[CheckOutcome]) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["name", "passed", "measured", "expected", "detail"])
        .map_err(err)?;
    for o in outcomes {
        w.write_record(&[
            o.name.clone(),
            o.passed.to_string(),
            o.measured.to_string(),
            o.expected.to_string(),
            o.detail.clone(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `Err(Verification)` naming every failed check.
pub fn summarize(outcomes: &[CheckOutcome]) -> Result<()> {
    let failed: Vec<String> = outcomes.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(failed.join("; ")))
    }
}
