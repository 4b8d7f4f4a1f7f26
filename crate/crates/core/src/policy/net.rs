use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::distributions::{squash, DiagonalGaussian};
use crate::envs::Dynamics;
use crate::error::{Error, Result};
use crate::networks::{Binding, Checkpoint, LayerSpec, Mlp, MlpSpec, ParameterStore, UpdateRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Signature {
    state_dim: usize,
    feature_dim: usize,
    action_dim: usize,
    action_bound: Option<Vec<f64>>,
}

impl Signature {
    fn of(dynamics: &dyn Dynamics) -> Self {
        Self {
            state_dim: dynamics.state_dim(),
            feature_dim: dynamics.feature_dim(),
            action_dim: dynamics.action_dim(),
            action_bound: dynamics.action_bound().map(<[f64]>::to_vec),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    hidden: Vec<LayerSpec>,
    update: UpdateRule,
    signature: Signature,
}

/// Gaussian policy π(a|s) over the pre-squash action, with parameters χ kept
/// apart from the estimator's θ. The prior π₀ is a standard normal on the
/// same pre-squash variable.
#[derive(Debug, Clone)]
pub struct Policy {
    hidden: Vec<LayerSpec>,
    signature: Signature,
    store: ParameterStore,
    net: Mlp,
}

impl Policy {
    pub fn new(hidden: Vec<LayerSpec>, update: UpdateRule, dynamics: &dyn Dynamics, rng: &mut impl Rng) -> Result<Self> {
        let signature = Signature::of(dynamics);
        let mut store = ParameterStore::new(update);
        let spec = MlpSpec {
            input_dim: signature.feature_dim,
            hidden: hidden.clone(),
            heads: MlpSpec::gaussian(signature.feature_dim, &[], signature.action_dim).heads,
        };
        let net = Mlp::build("policy", spec, &mut store, rng)?;
        Ok(Self {
            hidden,
            signature,
            store,
            net,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.signature.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.signature.action_dim
    }

    pub fn action_bound(&self) -> Option<&[f64]> {
        self.signature.action_bound.as_deref()
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Binding> {
        self.store.bind(tape, trainable)
    }

    pub fn check_compatible(&self, dynamics: &dyn Dynamics) -> Result<()> {
        let theirs = Signature::of(dynamics);
        if theirs != self.signature {
            return Err(Error::Validation(format!(
                "policy was built for {:?} but dynamics provide {:?}",
                self.signature, theirs
            )));
        }
        Ok(())
    }

    /// π(·|s) over the pre-squash action for a `[B, d_s]` batch.
    pub fn distribution(&self, tape: &mut Tape, chi: &Binding, dynamics: &dyn Dynamics, states: Var) -> Result<DiagonalGaussian> {
        let feats = dynamics.features(tape, states)?;
        self.net.forward_gaussian(tape, chi, feats)
    }

    /// Applied action for pre-squash values (squashed when the dynamics are bounded).
    pub fn to_action(&self, tape: &mut Tape, pre: Var) -> Result<Var> {
        match &self.signature.action_bound {
            Some(b) => Ok(squash(tape, pre, b)?.action),
            None => Ok(pre),
        }
    }

    /// Plain-value actions for a flat `[B, d_s]` batch; `noise = None` takes the mean.
    pub fn act_values(&self, dynamics: &dyn Dynamics, states: &[f64], noise: Option<&[f64]>) -> Result<Vec<f64>> {
        let ds = self.signature.state_dim;
        let da = self.signature.action_dim;
        if states.is_empty() || states.len() % ds != 0 {
            return Err(Error::Validation(format!("states must be a non-empty multiple of {ds} values")));
        }
        let b = states.len() / ds;
        let mut tape = Tape::new();
        let chi = self.bind(&mut tape, false)?;
        let s = tape.constant(states.to_vec(), &[b, ds])?;
        let dist = self.distribution(&mut tape, &chi, dynamics, s)?;
        let pre = match noise {
            Some(eps) => {
                if eps.len() != b * da {
                    return Err(Error::Validation("policy noise does not match the batch".into()));
                }
                let e = tape.constant(eps.to_vec(), &[b, da])?;
                dist.rsample(&mut tape, e)?
            }
            None => dist.mean,
        };
        let a = self.to_action(&mut tape, pre)?;
        Ok(tape.value(a).to_vec())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Metadata {
            hidden: self.hidden.clone(),
            update: self.store.rule(),
            signature: self.signature.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        let mut ckpt = Checkpoint::new(text);
        self.store.write_into(&mut ckpt, "chi.");
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dynamics: &dyn Dynamics) -> Result<Self> {
        let meta: Metadata = toml::from_str(&ckpt.metadata)
            .map_err(|e| Error::Validation(format!("policy checkpoint metadata: {e}")))?;
        let theirs = Signature::of(dynamics);
        if theirs != meta.signature {
            return Err(Error::Validation(format!(
                "policy checkpoint expects {:?} but the configured dynamics provide {:?}",
                meta.signature, theirs
            )));
        }
        let mut rng = crate::rng::stream_rng(0, crate::rng::Stream::Init);
        let mut policy = Self::new(meta.hidden, meta.update, dynamics, &mut rng)?;
        policy.store.read_from(ckpt, "chi.")?;
        Ok(policy)
    }
}
