use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use empower_core::dvbf::{write_dynamics_log, LatentDynamics};
use empower_core::empowerment::{write_source_log, EmpowermentEstimator};
use empower_core::envs::Dataset;
use empower_core::experiment::{
    compute_landscape, evaluate, fit_dynamics, generate_data, init_agent, overlay_trajectory, simulator, train_agent,
    write_trajectory_csv, DynamicsMode, ExperimentConfig, LandscapeMode, Manifest, Profile, Simulator,
};
use empower_core::networks::Checkpoint;
use empower_core::policy::{write_policy_log, EvalReport, Policy};
use empower_core::verify::{run_all, summarize, write_report_csv, VerifyConfig};
use empower_core::{Error, Result};

const DATASET: &str = "dataset.ckpt";
const DATASET_CSV: &str = "dataset.csv";
const DYNAMICS: &str = "dynamics.ckpt";
const DYNAMICS_LOG: &str = "dynamics_loss.csv";
const ESTIMATOR: &str = "estimator.ckpt";
const POLICY: &str = "policy.ckpt";
const PRETRAIN_LOG: &str = "pretrain.csv";
const POLICY_LOG: &str = "policy_train.csv";
const LANDSCAPE: &str = "landscape.csv";
const TRAJECTORY: &str = "trajectory.csv";
const EVAL_METRICS: &str = "eval.csv";
const EVAL_SUMMARY: &str = "eval_summary.txt";
const HIST_TRAINED: &str = "histogram_trained.csv";
const HIST_UNIFORM: &str = "histogram_uniform.csv";
const VERIFY: &str = "verify.csv";
const CONFIG: &str = "config.toml";

/// Empowerment estimation, policy training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "empower", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect random-policy trajectories.
    GenData(Common),
    /// Fit the latent dynamics model to the dataset.
    TrainDynamics(Common),
    /// Pre-train source and planner, then train policy and estimator jointly.
    Train(Common),
    /// Export the empowerment landscape grid and a policy trajectory.
    Landscape(Common),
    /// Evaluate the trained policy and the uniform baseline on the environment.
    Eval(Common),
    /// Run the gradient and oracle verification checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Master seed, overriding the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// full runs the config as written; ci caps iterations, grids and evaluations.
    #[arg(long, default_value = "full", value_parser = ["full", "ci"])]
    profile: String,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Seed of the synthetic checks.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Directory for the check report CSV.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

struct Run {
    cfg: ExperimentConfig,
    profile: String,
    dir: PathBuf,
    force: bool,
}

impl Run {
    fn open(args: &Common) -> Result<Self> {
        let profile: Profile = args.profile.parse()?;
        let cfg = ExperimentConfig::load(&args.config)?.with_overrides(args.seed, args.out.clone(), profile)?;
        let dir = cfg.output_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let run = Self {
            cfg,
            profile: profile.to_string(),
            dir,
            force: args.force,
        };
        run.record_config()?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Keeps one resolved config per output directory; a different one is
    /// refused unless forced.
    fn record_config(&self) -> Result<()> {
        let path = self.path(CONFIG);
        let text = self.cfg.to_toml()?;
        if let Ok(existing) = fs::read_to_string(&path) {
            if existing == text {
                return Ok(());
            }
            if !self.force {
                return Err(Error::Validation(format!(
                    "{} holds a different config; pass --force to replace it",
                    path.display()
                )));
            }
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Refuses to overwrite existing outputs without --force.
    fn claim(&self, command: &str, files: &[&str]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        let manifest = Manifest::file_name(command);
        for f in files.iter().copied().chain([manifest.as_str()]) {
            let p = self.path(f);
            if p.exists() {
                return Err(Error::Validation(format!("{} exists; pass --force to overwrite", p.display())));
            }
        }
        Ok(())
    }

    fn finish(&self, command: &str, files: &[&str]) -> Result<()> {
        Manifest::new(command, &self.cfg, &self.profile, &self.dir, files)?.save(&self.dir)?;
        eprintln!("{command}: wrote {} to {}", files.join(", "), self.dir.display());
        Ok(())
    }

    fn dataset(&self) -> Result<Dataset> {
        Dataset::load_binary(self.path(DATASET))
    }

    fn simulator(&self) -> Result<Simulator> {
        match self.cfg.dynamics {
            DynamicsMode::Analytic => simulator(&self.cfg, None),
            DynamicsMode::Learned => {
                let latent = LatentDynamics::from_checkpoint(&Checkpoint::load(self.path(DYNAMICS))?)?;
                let data = self.dataset()?;
                simulator(&self.cfg, Some((latent, &data)))
            }
        }
    }

    fn estimator(&self, sim: &Simulator) -> Result<EmpowermentEstimator> {
        let est = EmpowermentEstimator::from_checkpoint(&Checkpoint::load(self.path(ESTIMATOR))?, sim.dynamics())?;
        if est.n_steps() != self.cfg.estimator.n_steps {
            return Err(Error::Validation(format!(
                "estimator checkpoint is {}-step, config estimator.n_steps is {}",
                est.n_steps(),
                self.cfg.estimator.n_steps
            )));
        }
        Ok(est)
    }

    fn policy(&self, sim: &Simulator) -> Result<Policy> {
        Policy::from_checkpoint(&Checkpoint::load(self.path(POLICY))?, sim.dynamics())
    }
}

fn progress(total: usize) -> impl Fn(usize, String) {
    let every = (total / 10).max(1);
    move |epoch, line| {
        if epoch % every == 0 || epoch + 1 == total {
            eprintln!("{line}");
        }
    }
}

fn gen_data(args: &Common) -> Result<()> {
    let run = Run::open(args)?;
    let files = [DATASET, DATASET_CSV];
    run.claim("gen-data", &files)?;
    let data = generate_data(&run.cfg)?;
    data.save_binary(run.path(DATASET))?;
    data.save_csv(run.path(DATASET_CSV))?;
    run.finish("gen-data", &files)
}

fn train_dynamics(args: &Common) -> Result<()> {
    let run = Run::open(args)?;
    let files = [DYNAMICS, DYNAMICS_LOG];
    run.claim("train-dynamics", &files)?;
    let data = run.dataset()?;
    let (latent, log) = fit_dynamics(&run.cfg, &data)?;
    let show = progress(log.len());
    for r in &log {
        show(r.epoch, format!("epoch {} elbo {:.4} kl {:.4}", r.epoch, r.elbo, r.kl));
    }
    latent.to_checkpoint()?.save(run.path(DYNAMICS))?;
    write_dynamics_log(&run.path(DYNAMICS_LOG), &log)?;
    run.finish("train-dynamics", &files)
}

fn train(args: &Common) -> Result<()> {
    let run = Run::open(args)?;
    let files = [ESTIMATOR, POLICY, PRETRAIN_LOG, POLICY_LOG];
    run.claim("train", &files)?;
    let sim = run.simulator()?;
    let mut agent = init_agent(&run.cfg, &sim)?;
    let show = progress(run.cfg.training.epochs);
    let outcome = train_agent(&run.cfg, &sim, &mut agent, |r| {
        show(r.epoch, format!("epoch {} beta {:.2} mi {:.4} kl {:.4}", r.epoch, r.beta, r.mean_mi, r.policy_kl));
    });
    agent.estimator.to_checkpoint()?.save(run.path(ESTIMATOR))?;
    agent.policy.to_checkpoint()?.save(run.path(POLICY))?;
    let logs = outcome?;
    write_source_log(&run.path(PRETRAIN_LOG), &logs.pretrain)?;
    write_policy_log(&run.path(POLICY_LOG), &logs.policy)?;
    run.finish("train", &files)
}

fn landscape(args: &Common) -> Result<()> {
    let run = Run::open(args)?;
    let grid = run.cfg.landscape_grid()?;
    let sim = run.simulator()?;
    let est = run.estimator(&sim)?;
    let needs_policy = run.cfg.landscape.mode == LandscapeMode::Accumulated || run.cfg.landscape.overlay_steps > 0;
    let policy = if needs_policy { Some(run.policy(&sim)?) } else { None };
    let mut files = vec![LANDSCAPE];
    if run.cfg.landscape.overlay_steps > 0 {
        files.push(TRAJECTORY);
    }
    run.claim("landscape", &files)?;
    let land = compute_landscape(&run.cfg, &sim, &est, policy.as_ref())?;
    land.write_csv(&run.path(LANDSCAPE))?;
    let best = land.argmax();
    eprintln!(
        "landscape {}×{}: argmax ({:.4}, {:.4}) = {:.4}",
        grid.points1, grid.points2, best.dim1, best.dim2, best.estimate.mean
    );
    if let Some(p) = policy.as_ref().filter(|_| run.cfg.landscape.overlay_steps > 0) {
        write_trajectory_csv(&run.path(TRAJECTORY), &overlay_trajectory(&run.cfg, &sim, p)?)?;
    }
    run.finish("landscape", &files)
}

fn metric_rows(trained: &EvalReport, uniform: &EvalReport) -> Vec<(String, String, String)> {
    let parse = |r: &EvalReport| -> Vec<(String, String)> {
        r.summary()
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
            .collect()
    };
    let u = parse(uniform);
    parse(trained)
        .into_iter()
        .map(|(k, v)| {
            let base = u.iter().find(|(uk, _)| *uk == k).map(|(_, uv)| uv.clone()).unwrap_or_default();
            (k, v, base)
        })
        .collect()
}

fn eval(args: &Common) -> Result<()> {
    let run = Run::open(args)?;
    let files = [EVAL_METRICS, EVAL_SUMMARY, HIST_TRAINED, HIST_UNIFORM];
    run.claim("eval", &files)?;
    let sim = run.simulator()?;
    let policy = run.policy(&sim)?;
    let trained = evaluate(&run.cfg, &sim, Some(&policy))?;
    let uniform = evaluate(&run.cfg, &sim, None)?;
    trained.histogram.write_csv(&run.path(HIST_TRAINED))?;
    uniform.histogram.write_csv(&run.path(HIST_UNIFORM))?;

    let path = run.path(EVAL_METRICS);
    let mut csv = String::from("metric,trained,uniform\n");
    for (k, t, u) in metric_rows(&trained, &uniform) {
        csv.push_str(&format!("{k},{t},{u}\n"));
    }
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;

    let summary = format!("[trained]\n{}\n[uniform]\n{}", trained.summary(), uniform.summary());
    let path = run.path(EVAL_SUMMARY);
    fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
    print!("{summary}");
    run.finish("eval", &files)
}

fn verify(args: &VerifyArgs) -> Result<()> {
    let cfg = VerifyConfig {
        seed: args.seed.unwrap_or(0),
        ..VerifyConfig::default()
    };
    if let Some(dir) = &args.out {
        let p = dir.join(VERIFY);
        if p.exists() && !args.force {
            return Err(Error::Validation(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    let outcomes = run_all(&cfg);
    for o in &outcomes {
        println!("{o}");
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_report_csv(&dir.join(VERIFY), &outcomes)?;
    }
    summarize(&outcomes)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainDynamics(a) => train_dynamics(a),
        Command::Train(a) => train(a),
        Command::Landscape(a) => landscape(a),
        Command::Eval(a) => eval(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
