//! Parameterized networks, parameter storage and the checkpoint container.

mod checkpoint;
mod mlp;
mod params;

pub use checkpoint::{Array, Checkpoint, CHECKPOINT_VERSION};
pub use mlp::{Activation, HeadSpec, HeadTransform, LayerSpec, Mlp, MlpSpec};
pub use params::{Binding, ParamId, ParameterStore, UpdateRule};

/// Serde form of an optional gradient-norm clip: `0` stands for no clipping,
/// so configs round-trip through formats without a null value.
pub mod clip_norm {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(norm: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(norm.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok((v > 0.0).then_some(v))
    }
}
