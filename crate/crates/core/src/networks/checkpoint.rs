//! Versioned JSON checkpoint: a map from dotted parameter name to its shape and
//! row-major values. Names are `online.<role>.<layer>.<weight|bias>` and
//! `target.<role>.<layer>.<weight|bias>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Mlp, NetworkConfig, NetworkStack, Predictors};
use crate::autodiff::Tensor;
use crate::rng::SplitMix64;

pub const CHECKPOINT_FORMAT: &str = "vcd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {format:?} version {version}")]
    Version { format: String, version: u32 },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("unexpected parameter {0} in checkpoint")]
    Unexpected(String),
    #[error("invalid network config in checkpoint: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: Option<u64>,
    pub step: u64,
    pub input_dim: usize,
    pub network: NetworkConfig,
    pub parameters: BTreeMap<String, ParamRecord>,
}

impl Checkpoint {
    pub fn from_stack(stack: &NetworkStack, seed: Option<u64>, step: u64) -> Self {
        let mut parameters = BTreeMap::new();
        let record = |t: &Tensor| ParamRecord {
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        };
        for (name, t) in stack.online.named() {
            parameters.insert(format!("online.{name}"), record(t));
        }
        for (name, t) in stack.target.named() {
            parameters.insert(format!("target.{name}"), record(t));
        }
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            step,
            input_dim: stack.input_dim,
            network: stack.config.clone(),
            parameters,
        }
    }

    /// Rebuilds the stack, checking that every parameter is present with the
    /// shape the network config implies and that nothing extra is stored.
    pub fn to_stack(&self) -> Result<NetworkStack, CheckpointError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                format: self.format.clone(),
                version: self.version,
            });
        }
        // Build a template of the right shape, then overwrite every tensor.
        let mut stack = NetworkStack::new(self.network.clone(), self.input_dim, &mut SplitMix64::new(0))
            .map_err(|e| CheckpointError::Config(e.to_string()))?;
        let mut used = 0usize;
        {
            let mut load = |prefix: &str, mlp: &mut Mlp| -> Result<(), CheckpointError> {
                for (i, layer) in mlp.layers.iter_mut().enumerate() {
                    for (kind, t) in [("weight", &mut layer.weight), ("bias", &mut layer.bias)] {
                        let name = format!("{prefix}.{i}.{kind}");
                        let rec = self
                            .parameters
                            .get(&name)
                            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
                        if rec.shape != t.shape() || rec.values.len() != t.len() {
                            return Err(CheckpointError::Shape {
                                name,
                                got: rec.shape.clone(),
                                expected: t.shape().to_vec(),
                            });
                        }
                        t.data_mut().copy_from_slice(&rec.values);
                        used += 1;
                    }
                }
                Ok(())
            };
            let o = &mut stack.online;
            load("online.encoder", &mut o.encoder)?;
            load("online.dynamics", &mut o.dynamics)?;
            load("online.projector", &mut o.projector)?;
            match &mut o.predictors {
                Predictors::Identity => {}
                Predictors::Shared(m) => load("online.predictor", m)?,
                Predictors::Separate { pre, con } => {
                    load("online.predictor_pre", pre)?;
                    load("online.predictor_con", con)?;
                }
            }
            load("online.q_head", &mut o.q_head)?;
            let t = &mut stack.target;
            load("target.encoder", &mut t.encoder)?;
            load("target.dynamics", &mut t.dynamics)?;
            load("target.projector", &mut t.projector)?;
            load("target.q_head", &mut t.q_head)?;
        }
        if used != self.parameters.len() {
            let known: Vec<String> = stack
                .online
                .named()
                .into_iter()
                .map(|(n, _)| format!("online.{n}"))
                .chain(stack.target.named().into_iter().map(|(n, _)| format!("target.{n}")))
                .collect();
            let extra = self
                .parameters
                .keys()
                .find(|k| !known.contains(k))
                .cloned()
                .unwrap_or_default();
            return Err(CheckpointError::Unexpected(extra));
        }
        Ok(stack)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, CheckpointError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let s = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&s)
    }
}
