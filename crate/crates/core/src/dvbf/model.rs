use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::distributions::{DiagonalGaussian, STD_MIN};
use crate::envs::Episode;
use crate::error::{Error, Result};
use crate::networks::{
    Activation, Binding, Checkpoint, HeadSpec, HeadTransform, LayerSpec, Mlp, MlpSpec, ParamId, ParameterStore,
    UpdateRule,
};
use crate::rng::standard_normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DvbfConfig {
    pub latent_dim: usize,
    /// Number of leading observations seen by the initial-state encoder (K).
    pub init_window: usize,
    pub transition_hidden: Vec<LayerSpec>,
    pub measurement_hidden: Vec<LayerSpec>,
    pub decoder_hidden: Vec<LayerSpec>,
    pub initial_encoder_hidden: Vec<LayerSpec>,
    pub initial_transform_hidden: Vec<LayerSpec>,
    /// Transition mean is `z + net(z, u)` instead of `net(z, u)`.
    pub residual_transition: bool,
    pub update: UpdateRule,
}

fn layer(width: usize, activation: Activation) -> Vec<LayerSpec> {
    vec![LayerSpec { width, activation }]
}

impl Default for DvbfConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            init_window: 3,
            transition_hidden: layer(128, Activation::Sigmoid),
            measurement_hidden: layer(128, Activation::Relu),
            decoder_hidden: layer(128, Activation::Relu),
            initial_encoder_hidden: layer(128, Activation::Relu),
            initial_transform_hidden: layer(128, Activation::Tanh),
            residual_transition: true,
            update: UpdateRule::default(),
        }
    }
}

/// Filtering state: the latent sample, the fused Gaussian and the
/// standardized innovation statistics. For the initial belief the innovation
/// fields hold the initial encoder's posterior over w₁.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBelief {
    pub z: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub innovation_mean: Vec<f64>,
    pub innovation_var: Vec<f64>,
}

/// Equal-length sequences, time-major: `observations[t]` is `[B · n_x]`,
/// `actions[t]` is `[B · n_u]` and moves step `t` to `t + 1`.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub batch: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl SequenceBatch {
    pub fn from_episodes(episodes: &[&Episode]) -> Result<Self> {
        let first = episodes.first().ok_or_else(|| Error::Validation("empty sequence batch".into()))?;
        let len = first.observations.len();
        if episodes.iter().any(|e| e.observations.len() != len || e.actions.len() + 1 != len) {
            return Err(Error::Validation("sequences in a batch must share one length".into()));
        }
        let observations = (0..len)
            .map(|t| episodes.iter().flat_map(|e| e.observations[t].iter().copied()).collect())
            .collect();
        let actions = (0..len - 1)
            .map(|t| episodes.iter().flat_map(|e| e.actions[t].iter().copied()).collect())
            .collect();
        Ok(Self {
            batch: episodes.len(),
            observations,
            actions,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Standard-normal draws for one ELBO evaluation.
#[derive(Debug, Clone)]
pub struct ElboNoise {
    pub init: Vec<f64>,
    pub steps: Vec<Vec<f64>>,
}

impl ElboNoise {
    pub fn sample(rng: &mut impl Rng, batch: usize, len: usize, latent_dim: usize) -> Self {
        Self {
            init: standard_normal(rng, batch * latent_dim),
            steps: (1..len).map(|_| standard_normal(rng, batch * latent_dim)).collect(),
        }
    }

    pub fn zeros(batch: usize, len: usize, latent_dim: usize) -> Self {
        Self {
            init: vec![0.0; batch * latent_dim],
            steps: (1..len).map(|_| vec![0.0; batch * latent_dim]).collect(),
        }
    }
}

/// Per-sequence `[B]` tensors; `elbo = reconstruction − kl`.
#[derive(Debug, Clone, Copy)]
pub struct ElboParts {
    pub elbo: Var,
    pub reconstruction: Var,
    pub kl: Var,
}

/// Precision-weighted product of the transition and measurement Gaussians.
pub fn fuse(tape: &mut Tape, mean_trans: Var, var_trans_hat: Var, mean_meas: Var, var_meas: Var) -> Result<(Var, Var)> {
    let denom = tape.add(var_meas, var_trans_hat)?;
    let a = tape.mul(mean_trans, var_meas)?;
    let b = tape.mul(mean_meas, var_trans_hat)?;
    let num = tape.add(a, b)?;
    let mean = tape.div(num, denom)?;
    let prod = tape.mul(var_meas, var_trans_hat)?;
    let var = tape.div(prod, denom)?;
    Ok((mean, var))
}

/// Plain-value [`fuse`].
pub fn fuse_values(mean_trans: &[f64], var_trans_hat: &[f64], mean_meas: &[f64], var_meas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut mean = Vec::with_capacity(mean_trans.len());
    let mut var = Vec::with_capacity(mean_trans.len());
    for i in 0..mean_trans.len() {
        let d = var_meas[i] + var_trans_hat[i];
        mean.push((mean_trans[i] * var_meas[i] + mean_meas[i] * var_trans_hat[i]) / d);
        var.push(var_meas[i] * var_trans_hat[i] / d);
    }
    (mean, var)
}

/// Fused posterior expressed as standardized noise relative to the transition prior.
pub fn innovation_noise(tape: &mut Tape, mean_q: Var, var_q: Var, mean_trans: Var, var_trans: Var) -> Result<(Var, Var)> {
    let std_trans = tape.sqrt(var_trans)?;
    let diff = tape.sub(mean_q, mean_trans)?;
    let mean = tape.div(diff, std_trans)?;
    let var = tape.div(var_q, var_trans)?;
    Ok((mean, var))
}

/// Plain-value [`innovation_noise`].
pub fn innovation_noise_values(mean_q: &[f64], var_q: &[f64], mean_trans: &[f64], var_trans: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mean = (0..mean_q.len())
        .map(|i| (mean_q[i] - mean_trans[i]) / var_trans[i].sqrt())
        .collect();
    let var = (0..mean_q.len()).map(|i| var_q[i] / var_trans[i]).collect();
    (mean, var)
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: DvbfConfig,
    obs_dim: usize,
    action_dim: usize,
    action_bound: Option<Vec<f64>>,
    obs_shift: Vec<f64>,
    obs_scale: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DvbfModel {
    config: DvbfConfig,
    obs_dim: usize,
    action_dim: usize,
    action_bound: Option<Vec<f64>>,
    obs_shift: Vec<f64>,
    obs_scale: Vec<f64>,
    store: ParameterStore,
    transition: Mlp,
    measurement: Mlp,
    decoder: Mlp,
    decoder_variance: ParamId,
    initial_encoder: Mlp,
    initial_transform: Mlp,
}

fn heads(parts: &[(usize, HeadTransform)]) -> Vec<HeadSpec> {
    parts.iter().map(|&(dim, transform)| HeadSpec { dim, transform }).collect()
}

impl DvbfModel {
    /// Observations are standardized with `obs_shift` / `obs_scale` before
    /// entering any network; reconstructions live in standardized units.
    pub fn new(
        config: DvbfConfig,
        obs_dim: usize,
        action_dim: usize,
        action_bound: Option<Vec<f64>>,
        obs_shift: Vec<f64>,
        obs_scale: Vec<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let nz = config.latent_dim;
        if nz == 0 || config.init_window == 0 || obs_dim == 0 || action_dim == 0 {
            return Err(Error::Config("latent_dim, init_window and data dims must be ≥ 1".into()));
        }
        if obs_shift.len() != obs_dim || obs_scale.len() != obs_dim || obs_scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("observation normalization must have one positive scale per dim".into()));
        }
        if let Some(b) = &action_bound {
            if b.len() != action_dim || b.iter().any(|&u| !(u > 0.0)) {
                return Err(Error::Config(format!("action bound {b:?} invalid for {action_dim} action dims")));
            }
        }
        use HeadTransform::{Exp, Identity, Square};
        let mut store = ParameterStore::new(config.update);
        let transition = Mlp::build(
            "transition",
            MlpSpec {
                input_dim: nz + action_dim,
                hidden: config.transition_hidden.clone(),
                heads: heads(&[(nz, Identity), (nz, Square), (nz, Square)]),
            },
            &mut store,
            rng,
        )?;
        let measurement = Mlp::build(
            "measurement",
            MlpSpec {
                input_dim: obs_dim,
                hidden: config.measurement_hidden.clone(),
                heads: heads(&[(nz, Identity), (nz, Square)]),
            },
            &mut store,
            rng,
        )?;
        let decoder = Mlp::build(
            "decoder",
            MlpSpec {
                input_dim: nz,
                hidden: config.decoder_hidden.clone(),
                heads: heads(&[(obs_dim, Identity)]),
            },
            &mut store,
            rng,
        )?;
        // single learned scalar, squared into the observation variance
        let decoder_variance = store.register("decoder.variance", &[1], vec![1.0])?;
        let initial_encoder = Mlp::build(
            "initial_encoder",
            MlpSpec {
                input_dim: config.init_window * obs_dim,
                hidden: config.initial_encoder_hidden.clone(),
                heads: heads(&[(nz, Identity), (nz, Exp)]),
            },
            &mut store,
            rng,
        )?;
        let initial_transform = Mlp::build(
            "initial_transform",
            MlpSpec {
                input_dim: nz,
                hidden: config.initial_transform_hidden.clone(),
                heads: heads(&[(nz, Identity)]),
            },
            &mut store,
            rng,
        )?;
        Ok(Self {
            config,
            obs_dim,
            action_dim,
            action_bound,
            obs_shift,
            obs_scale,
            store,
            transition,
            measurement,
            decoder,
            decoder_variance,
            initial_encoder,
            initial_transform,
        })
    }

    pub fn config(&self) -> &DvbfConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn action_bound(&self) -> Option<&[f64]> {
        self.action_bound.as_deref()
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn transition_net(&self) -> &Mlp {
        &self.transition
    }

    pub fn measurement_net(&self) -> &Mlp {
        &self.measurement
    }

    pub fn decoder_net(&self) -> &Mlp {
        &self.decoder
    }

    pub fn initial_encoder_net(&self) -> &Mlp {
        &self.initial_encoder
    }

    pub fn initial_transform_net(&self) -> &Mlp {
        &self.initial_transform
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Binding> {
        self.store.bind(tape, trainable)
    }

    pub fn normalize_obs(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.obs_shift[i % self.obs_dim]) / self.obs_scale[i % self.obs_dim])
            .collect()
    }

    pub fn denormalize_obs(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| v * self.obs_scale[i % self.obs_dim] + self.obs_shift[i % self.obs_dim])
            .collect()
    }

    fn action_input(&self, tape: &mut Tape, u: Var) -> Result<Var> {
        match &self.action_bound {
            Some(b) => {
                let inv = tape.constant(b.iter().map(|v| 1.0 / v).collect(), &[self.action_dim])?;
                Ok(tape.mul(u, inv)?)
            }
            None => Ok(u),
        }
    }

    /// `(μ_trans, σ²_trans, σ̂²_trans)` for latent states `[B, n_z]` and actions `[B, n_u]`.
    pub fn transition(&self, tape: &mut Tape, params: &Binding, z: Var, u: Var) -> Result<(Var, Var, Var)> {
        let u = self.action_input(tape, u)?;
        let input = tape.concat(&[z, u])?;
        let out = self.transition.forward(tape, params, input)?;
        let mean = if self.config.residual_transition {
            tape.add(z, out[0])?
        } else {
            out[0]
        };
        Ok((mean, out[1], out[2]))
    }

    /// `(μ_meas, σ²_meas)` for standardized observations.
    pub fn measurement(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<(Var, Var)> {
        let out = self.measurement.forward(tape, params, x)?;
        Ok((out[0], out[1]))
    }

    /// Decoder mean (standardized units) and the shared scalar variance `[1]`.
    pub fn decode(&self, tape: &mut Tape, params: &Binding, z: Var) -> Result<(Var, Var)> {
        let mean = self.decoder.forward(tape, params, z)?[0];
        let s = tape.square(params.get(self.decoder_variance));
        Ok((mean, tape.offset(s, STD_MIN * STD_MIN)))
    }

    /// ln p(x | z) summed over observation dims, `[B]`.
    pub fn decoder_log_prob(&self, tape: &mut Tape, params: &Binding, z: Var, x: Var) -> Result<Var> {
        let (mean, var) = self.decode(tape, params, z)?;
        let std = tape.sqrt(var)?;
        let b = tape.shape(z)[0];
        let ones = tape.constant(vec![1.0; b * self.obs_dim], &[b, self.obs_dim])?;
        let std = tape.mul(ones, std)?;
        DiagonalGaussian::new(tape, mean, std)?.log_prob(tape, x)
    }

    /// First latent state from the first K standardized observations
    /// concatenated per row, and the KL of the initial encoder to N(0, I).
    pub fn initial(&self, tape: &mut Tape, params: &Binding, window: Var, noise: Var) -> Result<(Var, Var, DiagonalGaussian)> {
        let q = self.initial_encoder.forward_gaussian(tape, params, window)?;
        let w = q.rsample(tape, noise)?;
        let z = self.initial_transform.forward(tape, params, w)?[0];
        let kl = q.kl_to_standard_normal(tape)?;
        Ok((z, kl, q))
    }

    fn constant_rows(&self, tape: &mut Tape, values: &[f64], batch: usize, width: usize) -> Result<Var> {
        if values.len() != batch * width {
            return Err(Error::Validation(format!(
                "expected {} values for a [{batch}, {width}] block, got {}",
                batch * width,
                values.len()
            )));
        }
        Ok(tape.constant(values.to_vec(), &[batch, width])?)
    }

    /// Single-sample reparametrized ELBO of each sequence in `batch`.
    pub fn elbo(&self, tape: &mut Tape, params: &Binding, batch: &SequenceBatch, noise: &ElboNoise) -> Result<ElboParts> {
        let k = self.config.init_window;
        let t_len = batch.len();
        if t_len < k {
            return Err(Error::Config(format!(
                "sequence length {t_len} is shorter than the initial-encoder window {k}"
            )));
        }
        if batch.actions.len() + 1 != t_len || noise.steps.len() + 1 != t_len {
            return Err(Error::Validation("actions/noise must cover every transition of the sequence".into()));
        }
        let b = batch.batch;
        let nz = self.config.latent_dim;
        let xs = batch
            .observations
            .iter()
            .map(|x| {
                let n = self.normalize_obs(x);
                self.constant_rows(tape, &n, b, self.obs_dim)
            })
            .collect::<Result<Vec<_>>>()?;
        let window = tape.concat(&xs[..k])?;
        let eps = self.constant_rows(tape, &noise.init, b, nz)?;
        let (mut z, kl_init, _) = self.initial(tape, params, window, eps)?;
        let mut recon = self.decoder_log_prob(tape, params, z, xs[0])?;
        let mut kl = kl_init;
        for t in 1..t_len {
            let u = self.constant_rows(tape, &batch.actions[t - 1], b, self.action_dim)?;
            let (mt, vt, vt_hat) = self.transition(tape, params, z, u)?;
            let (mm, vm) = self.measurement(tape, params, xs[t])?;
            let (mq, vq) = fuse(tape, mt, vt_hat, mm, vm)?;
            let (mw, vw) = innovation_noise(tape, mq, vq, mt, vt)?;
            let innovation = DiagonalGaussian::from_variance(tape, mw, vw)?;
            let eps = self.constant_rows(tape, &noise.steps[t - 1], b, nz)?;
            let w = innovation.rsample(tape, eps)?;
            let st = tape.sqrt(vt)?;
            let jump = tape.mul(st, w)?;
            z = tape.add(mt, jump)?;
            let lp = self.decoder_log_prob(tape, params, z, xs[t])?;
            recon = tape.add(recon, lp)?;
            let kl_t = innovation.kl_to_standard_normal(tape)?;
            kl = tape.add(kl, kl_t)?;
        }
        let elbo = tape.sub(recon, kl)?;
        Ok(ElboParts {
            elbo,
            reconstruction: recon,
            kl,
        })
    }

    /// Belief after the initial encoder saw the first K raw observations.
    /// `noise = None` takes the encoder mean.
    pub fn initial_belief(&self, observations: &[Vec<f64>], noise: Option<&[f64]>) -> Result<LatentBelief> {
        Ok(self.initial_beliefs(&[observations.to_vec()], noise)?.remove(0))
    }

    /// Batched [`initial_belief`](Self::initial_belief) for several windows.
    pub fn initial_beliefs(&self, windows: &[Vec<Vec<f64>>], noise: Option<&[f64]>) -> Result<Vec<LatentBelief>> {
        let k = self.config.init_window;
        let nz = self.config.latent_dim;
        let b = windows.len();
        let mut flat = Vec::with_capacity(b * k * self.obs_dim);
        for w in windows {
            if w.len() != k || w.iter().any(|x| x.len() != self.obs_dim) {
                return Err(Error::Validation(format!(
                    "initial belief needs {k} observations of dim {}",
                    self.obs_dim
                )));
            }
            for x in w {
                flat.extend(self.normalize_obs(x));
            }
        }
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let window = tape.constant(flat, &[b, k * self.obs_dim])?;
        let eps = match noise {
            Some(n) => self.constant_rows(&mut tape, n, b, nz)?,
            None => tape.constant(vec![0.0; b * nz], &[b, nz])?,
        };
        let (z, _, q) = self.initial(&mut tape, &params, window, eps)?;
        let zs = tape.value(z).to_vec();
        let means = tape.value(q.mean).to_vec();
        let stds = tape.value(q.std).to_vec();
        Ok((0..b)
            .map(|i| {
                let z = zs[i * nz..(i + 1) * nz].to_vec();
                LatentBelief {
                    mean: z.clone(),
                    var: vec![0.0; nz],
                    z,
                    innovation_mean: means[i * nz..(i + 1) * nz].to_vec(),
                    innovation_var: stds[i * nz..(i + 1) * nz].iter().map(|s| s * s).collect(),
                }
            })
            .collect())
    }

    /// Propagates `belief` through the transition with action `u`, fuses
    /// with the measurement of `x_next` and draws z via the innovation.
    pub fn filter_step(&self, belief: &LatentBelief, u: &[f64], x_next: &[f64], noise: &[f64]) -> Result<LatentBelief> {
        let nz = self.config.latent_dim;
        if belief.z.len() != nz || u.len() != self.action_dim || x_next.len() != self.obs_dim || noise.len() != nz {
            return Err(Error::Validation("filter_step inputs do not match the model dimensions".into()));
        }
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let z = tape.constant(belief.z.clone(), &[1, nz])?;
        let uv = tape.constant(u.to_vec(), &[1, self.action_dim])?;
        let x = tape.constant(self.normalize_obs(x_next), &[1, self.obs_dim])?;
        let (mt, vt, vt_hat) = self.transition(&mut tape, &params, z, uv)?;
        let (mm, vm) = self.measurement(&mut tape, &params, x)?;
        let (mq, vq) = fuse(&mut tape, mt, vt_hat, mm, vm)?;
        let (mw, vw) = innovation_noise(&mut tape, mq, vq, mt, vt)?;
        let innovation = DiagonalGaussian::from_variance(&mut tape, mw, vw)?;
        let eps = tape.constant(noise.to_vec(), &[1, nz])?;
        let w = innovation.rsample(&mut tape, eps)?;
        let st = tape.sqrt(vt)?;
        let jump = tape.mul(st, w)?;
        let z_next = tape.add(mt, jump)?;
        Ok(LatentBelief {
            z: tape.value(z_next).to_vec(),
            mean: tape.value(mq).to_vec(),
            var: tape.value(vq).to_vec(),
            innovation_mean: tape.value(mw).to_vec(),
            innovation_var: tape.value(vw).to_vec(),
        })
    }

    /// Mean-filtered beliefs for every step of an episode with `H` actions and
    /// `H + 1 ≥ K` observations; entry `t` belongs to observation `t`.
    pub fn filter_episode(&self, observations: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<LatentBelief>> {
        let k = self.config.init_window;
        if observations.len() < k || observations.len() != actions.len() + 1 {
            return Err(Error::Validation(format!(
                "filtering needs H + 1 ≥ {k} observations for H actions, got {} and {}",
                observations.len(),
                actions.len()
            )));
        }
        let zeros = vec![0.0; self.config.latent_dim];
        let mut belief = self.initial_belief(&observations[..k], None)?;
        let mut out = Vec::with_capacity(observations.len());
        for (u, x) in actions.iter().zip(&observations[1..]) {
            let next = self.filter_step(&belief, u, x, &zeros)?;
            out.push(std::mem::replace(&mut belief, next));
        }
        out.push(belief);
        Ok(out)
    }

    /// Decoded observation (raw units) predicted one step ahead of latent `z` under `u`.
    pub fn predict_observation(&self, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let nz = self.config.latent_dim;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let zv = tape.constant(z.to_vec(), &[1, nz])?;
        let uv = tape.constant(u.to_vec(), &[1, self.action_dim])?;
        let (mt, _, _) = self.transition(&mut tape, &params, zv, uv)?;
        let (mean, _) = self.decode(&mut tape, &params, mt)?;
        Ok(self.denormalize_obs(tape.value(mean)))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Metadata {
            config: self.config.clone(),
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            action_bound: self.action_bound.clone(),
            obs_shift: self.obs_shift.clone(),
            obs_scale: self.obs_scale.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        let mut ckpt = Checkpoint::new(text);
        self.store.write_into(&mut ckpt, "lambda.");
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: Metadata = toml::from_str(&ckpt.metadata)
            .map_err(|e| Error::Validation(format!("dynamics checkpoint metadata: {e}")))?;
        let mut rng = crate::rng::stream_rng(0, crate::rng::Stream::Init);
        let mut model = Self::new(
            meta.config,
            meta.obs_dim,
            meta.action_dim,
            meta.action_bound,
            meta.obs_shift,
            meta.obs_scale,
            &mut rng,
        )?;
        model.store.read_from(ckpt, "lambda.")?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check_coords;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;

    fn tiny(residual: bool, hidden: usize) -> DvbfConfig {
        let h = |a| {
            if hidden == 0 {
                vec![]
            } else {
                layer(hidden, a)
            }
        };
        DvbfConfig {
            latent_dim: 2,
            init_window: 2,
            transition_hidden: h(Activation::Sigmoid),
            measurement_hidden: h(Activation::Relu),
            decoder_hidden: h(Activation::Tanh),
            initial_encoder_hidden: h(Activation::Tanh),
            initial_transform_hidden: h(Activation::Tanh),
            residual_transition: residual,
            update: UpdateRule::default(),
        }
    }

    fn toy_batch() -> SequenceBatch {
        let ep = |o: f64| Episode {
            observations: vec![vec![o, 0.1], vec![o + 0.2, 0.0], vec![o + 0.5, -0.2]],
            actions: vec![vec![0.3], vec![-0.4]],
        };
        let (a, b) = (ep(0.1), ep(-0.5));
        SequenceBatch::from_episodes(&[&a, &b]).unwrap()
    }

    #[test]
    fn symmetric_fusion_averages_means_and_halves_variance() {
        let (m, v) = fuse_values(&[1.0, -3.0], &[0.7, 2.0], &[2.0, 5.0], &[0.7, 2.0]);
        assert!((m[0] - 1.5).abs() < 1e-12 && (m[1] - 1.0).abs() < 1e-12);
        assert!((v[0] - 0.35).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_worked_example_and_uninformative_limit() {
        let (m, v) = fuse_values(&[0.0], &[1.0], &[2.0], &[3.0]);
        assert!((m[0] - 0.5).abs() < 1e-15 && (v[0] - 0.75).abs() < 1e-15);
        let (m, v) = fuse_values(&[0.3], &[1.0], &[9.0], &[1e12]);
        assert!((m[0] - 0.3).abs() < 1e-10 && (v[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn tape_fusion_matches_plain_values() {
        let mut t = Tape::new();
        let c = |t: &mut Tape, v: f64| t.constant(vec![v], &[1]).unwrap();
        let (a, b, cc, d) = (c(&mut t, 0.4), c(&mut t, 0.9), c(&mut t, -1.1), c(&mut t, 0.3));
        let (m, v) = fuse(&mut t, a, b, cc, d).unwrap();
        let (pm, pv) = fuse_values(&[0.4], &[0.9], &[-1.1], &[0.3]);
        assert_eq!(t.value(m)[0], pm[0]);
        assert_eq!(t.value(v)[0], pv[0]);
    }

    #[test]
    fn innovation_at_the_prior_is_standard_normal() {
        let (m, v) = innovation_noise_values(&[0.8, -2.0], &[0.3, 4.0], &[0.8, -2.0], &[0.3, 4.0]);
        assert_eq!(m, vec![0.0, 0.0]);
        assert_eq!(v, vec![1.0, 1.0]);
        let mut t = Tape::new();
        let mw = t.constant(m, &[2]).unwrap();
        let sw = t.constant(v, &[2]).unwrap();
        let kl = DiagonalGaussian::new(&t, mw, sw).unwrap().kl_to_standard_normal(&mut t).unwrap();
        assert!(t.item(kl).abs() < 1e-12);
        let (m, v) = innovation_noise_values(&[2.0], &[0.25], &[0.0], &[4.0]);
        assert_eq!(m, vec![1.0]);
        assert_eq!(v, vec![0.0625]);
        let (_, v) = innovation_noise_values(&[0.0], &[1.0], &[0.0], &[4.0]);
        assert_eq!(v, vec![0.25]);
    }

    proptest! {
        #[test]
        fn fusion_is_symmetric_and_shrinks_variance(
            mt in -5.0f64..5.0, mm in -5.0f64..5.0, vt in 1e-3f64..10.0, vm in 1e-3f64..10.0,
        ) {
            let (m1, v1) = fuse_values(&[mt], &[vt], &[mm], &[vm]);
            let (m2, v2) = fuse_values(&[mm], &[vm], &[mt], &[vt]);
            prop_assert!((m1[0] - m2[0]).abs() < 1e-12);
            prop_assert!((v1[0] - v2[0]).abs() < 1e-12);
            prop_assert!(v1[0] < vt && v1[0] < vm);
            let (_, w) = innovation_noise_values(&m1, &v1, &[mt], &[vt]);
            prop_assert!(w[0] > 0.0);
        }
    }

    #[test]
    fn short_sequences_are_a_config_error() {
        let mut cfg = tiny(true, 3);
        cfg.init_window = 4;
        let m = DvbfModel::new(cfg, 2, 1, Some(vec![1.0]), vec![0.0; 2], vec![1.0; 2], &mut stream_rng(1, Stream::Init)).unwrap();
        let mut t = Tape::new();
        let p = m.bind(&mut t, false).unwrap();
        let batch = toy_batch();
        let err = m.elbo(&mut t, &p, &batch, &ElboNoise::zeros(2, 3, 2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn elbo_is_reconstruction_minus_nonnegative_kl() {
        let m = DvbfModel::new(tiny(true, 4), 2, 1, Some(vec![1.0]), vec![0.0; 2], vec![1.0; 2], &mut stream_rng(2, Stream::Init)).unwrap();
        let mut t = Tape::new();
        let p = m.bind(&mut t, false).unwrap();
        let noise = ElboNoise::sample(&mut stream_rng(2, Stream::Dynamics), 2, 3, 2);
        let parts = m.elbo(&mut t, &p, &toy_batch(), &noise).unwrap();
        for i in 0..2 {
            let (e, r, k) = (t.value(parts.elbo)[i], t.value(parts.reconstruction)[i], t.value(parts.kl)[i]);
            assert!(k >= 0.0);
            assert!(e <= r);
            assert!((e - (r - k)).abs() < 1e-12);
        }
    }

    #[test]
    fn elbo_gradcheck_over_all_parameters() {
        let m = DvbfModel::new(tiny(true, 3), 2, 1, Some(vec![1.0]), vec![0.1, 0.0], vec![0.5, 1.0], &mut stream_rng(3, Stream::Init)).unwrap();
        let batch = toy_batch();
        let noise = ElboNoise::sample(&mut stream_rng(3, Stream::Dynamics), 2, 3, 2);
        let x = m.store().flat_values();
        let coords: Vec<usize> = (0..x.len()).collect();
        let check = finite_difference_check_coords(
            |t: &mut Tape, v: Var| -> Result<Var> {
                let p = m.store().bind_flat(t, v)?;
                let parts = m.elbo(t, &p, &batch, &noise)?;
                Ok(t.sum(parts.elbo))
            },
            &x,
            1e-6,
            &coords,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    /// Exact ln p(x₁, x₂ | u₁) of the affine-Gaussian model obtained with
    /// zero hidden layers and state-independent variance heads.
    #[test]
    fn elbo_lower_bounds_the_exact_evidence_of_a_linear_model() {
        let mut cfg = tiny(true, 0);
        cfg.latent_dim = 1;
        cfg.init_window = 1;
        let mut m = DvbfModel::new(cfg, 1, 1, None, vec![0.0], vec![1.0], &mut stream_rng(4, Stream::Init)).unwrap();
        let set = |m: &mut DvbfModel, name: &str, v: &[f64]| {
            let id = m.store().id(name).unwrap();
            m.store_mut().value_mut(id).copy_from_slice(v);
        };
        // transition: μ = z + (−0.2 z + 0.5 u + 0.1), σ² = 0.3², σ̂² = 0.6²
        set(&mut m, "transition.h0.w", &[-0.2, 0.5]);
        set(&mut m, "transition.h0.b", &[0.1]);
        set(&mut m, "transition.h1.w", &[0.0, 0.0]);
        set(&mut m, "transition.h1.b", &[0.3]);
        set(&mut m, "transition.h2.w", &[0.0, 0.0]);
        set(&mut m, "transition.h2.b", &[0.6]);
        // decoder: x = 1.5 z − 0.2 + N(0, 0.4²)
        set(&mut m, "decoder.h0.w", &[1.5]);
        set(&mut m, "decoder.h0.b", &[-0.2]);
        set(&mut m, "decoder.variance", &[0.4]);
        // z₁ = 0.8 w₁ + 0.3 with w₁ ~ N(0, 1)
        set(&mut m, "initial_transform.h0.w", &[0.8]);
        set(&mut m, "initial_transform.h0.b", &[0.3]);

        let (x1, x2, u1) = (0.9, 1.4, 0.7);
        let (a, c, s2): (f64, f64, f64) = (0.8, 0.3, 0.09);
        let (d, e, r2): (f64, f64, f64) = (1.5, -0.2, 0.16);
        // z₁ ~ N(c, a²); z₂ = 0.8 z₁ + 0.5 u + 0.1 + N(0, s²)
        let mz1 = c;
        let vz1 = a * a;
        let mz2 = 0.8 * mz1 + 0.5 * u1 + 0.1;
        let vz2 = 0.64 * vz1 + s2;
        let cz = 0.8 * vz1;
        let mean = [d * mz1 + e, d * mz2 + e];
        let cov = [[d * d * vz1 + r2, d * d * cz], [d * d * cz, d * d * vz2 + r2]];
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let (dx, dy) = (x1 - mean[0], x2 - mean[1]);
        let quad = (cov[1][1] * dx * dx - 2.0 * cov[0][1] * dx * dy + cov[0][0] * dy * dy) / det;
        let exact = -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * quad;

        let ep = Episode {
            observations: vec![vec![x1], vec![x2]],
            actions: vec![vec![u1]],
        };
        let n = 20_000;
        let batch = SequenceBatch::from_episodes(&vec![&ep; n]).unwrap();
        let noise = ElboNoise::sample(&mut stream_rng(4, Stream::Dynamics), n, 2, 1);
        let mut t = Tape::new();
        let p = m.bind(&mut t, false).unwrap();
        let elbo = m.elbo(&mut t, &p, &batch, &noise).unwrap().elbo;
        let samples = t.value(elbo).to_vec();
        let n = samples.len() as f64;
        let mean_elbo = samples.iter().sum::<f64>() / n;
        let se = (samples.iter().map(|v| (v - mean_elbo).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!(mean_elbo <= exact + 3.0 * se, "ELBO {mean_elbo} ± {se} vs exact {exact}");
    }

    #[test]
    fn uninformative_measurement_follows_the_transition() {
        let mut m = DvbfModel::new(tiny(true, 3), 2, 1, Some(vec![1.0]), vec![0.0; 2], vec![1.0; 2], &mut stream_rng(5, Stream::Init)).unwrap();
        let id = m.store().id("measurement.h1.b").unwrap();
        m.store_mut().value_mut(id).copy_from_slice(&[1e6, 1e6]);
        let wid = m.store().id("measurement.h1.w").unwrap();
        m.store_mut().value_mut(wid).iter_mut().for_each(|v| *v = 0.0);
        let b0 = m.initial_belief(&[vec![0.1, 0.2], vec![0.0, 0.1]], None).unwrap();
        let b1 = m.filter_step(&b0, &[0.5], &[3.0, -3.0], &[0.0, 0.0]).unwrap();
        let mut t = Tape::new();
        let p = m.bind(&mut t, false).unwrap();
        let z = t.constant(b0.z.clone(), &[1, 2]).unwrap();
        let u = t.constant(vec![0.5], &[1, 1]).unwrap();
        let (mt, _, _) = m.transition(&mut t, &p, z, u).unwrap();
        for (a, b) in b1.mean.iter().zip(t.value(mt)) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = DvbfModel::new(tiny(true, 3), 2, 1, Some(vec![1.0]), vec![0.5, 0.0], vec![2.0, 1.0], &mut stream_rng(6, Stream::Init)).unwrap();
        let back = DvbfModel::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.store().flat_values(), m.store().flat_values());
        assert_eq!(back.normalize_obs(&[1.0, 1.0]), vec![0.25, 1.0]);
    }
}
