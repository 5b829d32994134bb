//! JSON model checkpoints.
//!
//! Weights are stored as nested numeric arrays: human-inspectable,
//! diff-able, and exact (serde_json emits shortest-round-trip floats),
//! so `load(save(c))` reproduces outputs bit-for-bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::AdamState;
use crate::flowmodel::{FlowError, Schedule, VelocityModel};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Model(#[from] FlowError),
}

/// Serialized model state: architecture, base and adapter weights,
/// schedule kind, training step, the RNG seed that drives derived
/// streams, and the hash of the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: VelocityModel,
    pub schedule: Schedule,
    pub step: u64,
    pub rng_seed: u64,
    pub config_hash: String,
    /// Optimizer moments, carried so a resumed run continues exactly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(
        model: VelocityModel,
        schedule: Schedule,
        step: u64,
        rng_seed: u64,
        config_hash: String,
        optimizer: Option<AdamState>,
    ) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model,
            schedule,
            step,
            rng_seed,
            config_hash,
            optimizer,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, CheckpointError> {
        let c: Checkpoint = serde_json::from_str(json)?;
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: c.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        c.model.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_json().as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmodel::ModelConfig;

    fn model() -> VelocityModel {
        let mut m = VelocityModel::new(
            &ModelConfig {
                dim: 2,
                hidden: vec![6],
                time_features: 4,
                periodic: false,
                conditioning: vec![0.5],
            },
            99,
        )
        .unwrap();
        m.attach_adapters(2, 1.0, 7).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let c = Checkpoint::new(m.clone(), Schedule::LinearOt, 41, 17, "abc".into(), None);
        let restored = Checkpoint::from_json(&c.to_json()).unwrap();
        assert_eq!(c, restored);
        // identical outputs, not merely identical JSON
        let x = [0.3, -0.9];
        assert_eq!(m.eval(&x, 0.42), restored.model.eval(&x, 0.42));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let c = Checkpoint::new(model(), Schedule::Trig, 0, 0, String::new(), None);
        let json = c.to_json().replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(matches!(
            Checkpoint::from_json(&json),
            Err(CheckpointError::Version { found: 9, .. })
        ));
    }

    #[test]
    fn save_load_through_the_filesystem() {
        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        let path = dir.join("model.json");
        let c = Checkpoint::new(model(), Schedule::LinearOt, 5, 3, "h".into(), None);
        c.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(c, loaded);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupted_weights_fail_validation() {
        let c = Checkpoint::new(model(), Schedule::LinearOt, 0, 0, String::new(), None);
        // drop one layer
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        let layers = v["model"]["layers"].as_array_mut().unwrap();
        layers.pop();
        let json = serde_json::to_string(&v).unwrap();
        assert!(Checkpoint::from_json(&json).is_err());
    }
}
