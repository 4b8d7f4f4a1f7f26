use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DvbfModel, ElboNoise, SequenceBatch};
use crate::autodiff::Tape;
use crate::envs::{Dataset, Episode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DvbfTrainConfig {
    pub epochs: usize,
    /// Length of the truncated training sequences (observations per window).
    pub window: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs over which the KL weight ramps linearly from 0.1 to 1; 0 disables annealing.
    pub kl_warmup_epochs: usize,
    #[serde(with = "crate::networks::clip_norm")]
    pub max_grad_norm: Option<f64>,
}

impl Default for DvbfTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            window: 20,
            stride: 10,
            batch_size: 32,
            learning_rate: 3e-3,
            kl_warmup_epochs: 0,
            max_grad_norm: Some(10.0),
        }
    }
}

/// Per-sequence means over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvbfTrainRecord {
    pub epoch: usize,
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

fn kl_weight(config: &DvbfTrainConfig, epoch: usize) -> f64 {
    if config.kl_warmup_epochs == 0 {
        1.0
    } else {
        (0.1 + 0.9 * epoch as f64 / config.kl_warmup_epochs as f64).min(1.0)
    }
}

/// Maximizes the mean ELBO over minibatches of truncated windows.
///
/// A non-finite ELBO or gradient aborts with a numeric error; the model keeps
/// the parameters of the last completed update.
pub fn train_dynamics(
    model: &mut DvbfModel,
    dataset: &Dataset,
    config: &DvbfTrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<DvbfTrainRecord>> {
    if dataset.episodes.is_empty() {
        return Err(Error::Validation("dynamics training needs a non-empty dataset".into()));
    }
    if config.batch_size == 0 || config.stride == 0 {
        return Err(Error::Config("batch_size and stride must be ≥ 1".into()));
    }
    if dataset.header.obs_dim != model.obs_dim() || dataset.header.action_dim != model.action_dim() {
        return Err(Error::Validation(format!(
            "dataset has obs/action dims {}/{} but the model expects {}/{}",
            dataset.header.obs_dim,
            dataset.header.action_dim,
            model.obs_dim(),
            model.action_dim()
        )));
    }
    let window = config.window.min(dataset.header.horizon + 1);
    if window < model.config().init_window {
        return Err(Error::Config(format!(
            "training window {window} is shorter than the initial-encoder window {}",
            model.config().init_window
        )));
    }
    let windows: Vec<Episode> = dataset.windows(window, config.stride);
    let nz = model.latent_dim();
    model.store_mut().set_max_grad_norm(config.max_grad_norm);
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let weight = kl_weight(config, epoch);
        let (mut elbo_sum, mut recon_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let episodes: Vec<&Episode> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = SequenceBatch::from_episodes(&episodes)?;
            let noise = ElboNoise::sample(rng, batch.batch, batch.len(), nz);
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true)?;
            let parts = model.elbo(&mut tape, &params, &batch, &noise)?;
            let elbo = tape.sum(parts.elbo);
            let recon = tape.sum(parts.reconstruction);
            let kl = tape.sum(parts.kl);
            let (e, r, k) = (tape.item(elbo), tape.item(recon), tape.item(kl));
            if !e.is_finite() {
                return Err(Error::Numeric(format!("ELBO became {e} in epoch {epoch}")));
            }
            elbo_sum += e;
            recon_sum += r;
            kl_sum += k;
            let weighted_kl = tape.scale(kl, weight);
            let objective = tape.sub(recon, weighted_kl)?;
            let objective = tape.scale(objective, 1.0 / batch.batch as f64);
            tape.backward(objective)?;
            let store = model.store_mut();
            store.accumulate_grads(&tape, &params);
            store.step(config.learning_rate)?;
        }
        let n = windows.len() as f64;
        log.push(DvbfTrainRecord {
            epoch,
            elbo: elbo_sum / n,
            reconstruction: recon_sum / n,
            kl: kl_sum / n,
        });
    }
    Ok(log)
}

/// Writes `epoch,elbo,reconstruction,kl` rows.
pub fn write_dynamics_log(path: &Path, records: &[DvbfTrainRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["epoch", "elbo", "reconstruction", "kl"]).map_err(err)?;
    for r in records {
        w.write_record(&[
            r.epoch.to_string(),
            r.elbo.to_string(),
            r.reconstruction.to_string(),
            r.kl.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Root-mean-square error of one-step observation predictions on `dataset`.
///
/// Each episode is filtered with mean (noise-free) updates; after the K − 1
/// warm-up steps the decoded transition mean predicts the next observation
/// before that observation is absorbed.
pub fn one_step_rmse(model: &DvbfModel, dataset: &Dataset) -> Result<f64> {
    let k = model.config().init_window;
    let zeros = vec![0.0; model.latent_dim()];
    let (mut sq, mut count) = (0.0, 0usize);
    for ep in &dataset.episodes {
        if ep.observations.len() < k + 1 {
            continue;
        }
        let mut belief = model.initial_belief(&ep.observations[..k], None)?;
        for t in 0..ep.actions.len() {
            if t + 1 >= k {
                let pred = model.predict_observation(&belief.z, &ep.actions[t])?;
                for (p, x) in pred.iter().zip(&ep.observations[t + 1]) {
                    sq += (p - x).powi(2);
                    count += 1;
                }
            }
            belief = model.filter_step(&belief, &ep.actions[t], &ep.observations[t + 1], &zeros)?;
        }
    }
    if count == 0 {
        return Err(Error::Validation("no episode is long enough for one-step prediction".into()));
    }
    Ok((sq / count as f64).sqrt())
}
