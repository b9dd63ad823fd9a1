//! JSON model checkpoints with flattened parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::snapshot::write_atomic;
use crate::error::{Error, Result};
use crate::numcore::{MlpSpec, ParamSet, ParamShape};
use crate::training::{BundleArch, MetaBlockArch, ModelBundle, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "limaml-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Flattened parameter arrays and their layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    pub shapes: Vec<ParamShape>,
    pub values: Vec<f64>,
}

impl FlatParams {
    pub fn from_params(p: &ParamSet) -> Self {
        Self {
            shapes: p.shapes(),
            values: p.flatten(),
        }
    }

    pub fn to_params(&self) -> Result<ParamSet> {
        ParamSet::unflatten(&self.values, &self.shapes)
    }
}

/// A single network (vanilla or MAML) or a two-block bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointModel {
    Network { spec: MlpSpec, params: FlatParams },
    Bundle {
        arch: BundleArch,
        meta: FlatParams,
        global: FlatParams,
    },
}

/// Run facts recorded alongside the parameters. Wall-clock times live in
/// the run manifest so checkpoints stay reproducible byte for byte.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CreationInfo {
    pub tool_version: String,
    pub algorithm: String,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub meta_dim: usize,
    pub other_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub format_version: u32,
    pub model: CheckpointModel,
    pub config: TrainConfig,
    pub created: CreationInfo,
}

impl Checkpoint {
    pub fn for_network(spec: &MlpSpec, params: &ParamSet, config: &TrainConfig, created: CreationInfo) -> Result<Self> {
        spec.check_params(params)?;
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            model: CheckpointModel::Network {
                spec: spec.clone(),
                params: FlatParams::from_params(params),
            },
            config: config.clone(),
            created,
        })
    }

    pub fn for_bundle(bundle: &ModelBundle, config: &TrainConfig, created: CreationInfo) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            model: CheckpointModel::Bundle {
                arch: bundle.arch.clone(),
                meta: FlatParams::from_params(&bundle.meta),
                global: FlatParams::from_params(&bundle.global),
            },
            config: config.clone(),
            created,
        }
    }

    /// Validates parameters against the stored architecture.
    pub fn validate(&self) -> Result<()> {
        match &self.model {
            CheckpointModel::Network { spec, params } => spec.check_params(&params.to_params()?),
            CheckpointModel::Bundle { arch, meta, global } => {
                ModelBundle::new(arch.clone(), meta.to_params()?, global.to_params()?).map(|_| ())
            }
        }
    }

    pub fn is_bundle(&self) -> bool {
        matches!(self.model, CheckpointModel::Bundle { .. })
    }

    pub fn network(&self) -> Result<(MlpSpec, ParamSet)> {
        match &self.model {
            CheckpointModel::Network { spec, params } => {
                let p = params.to_params()?;
                spec.check_params(&p)?;
                Ok((spec.clone(), p))
            }
            CheckpointModel::Bundle { .. } => Err(Error::Architecture(
                "checkpoint holds a two-block bundle, not a single network".into(),
            )),
        }
    }

    pub fn bundle(&self) -> Result<ModelBundle> {
        match &self.model {
            CheckpointModel::Bundle { arch, meta, global } => {
                ModelBundle::new(arch.clone(), meta.to_params()?, global.to_params()?)
            }
            CheckpointModel::Network { .. } => Err(Error::Architecture(
                "checkpoint holds a single network, not a two-block bundle".into(),
            )),
        }
    }

    /// Loads the stored network into `expected`, naming the first layer
    /// whose shape differs.
    pub fn network_into(&self, expected: &MlpSpec) -> Result<ParamSet> {
        let (_, params) = self.network()?;
        expected.check_params(&params)?;
        Ok(params)
    }

    /// Loads the stored bundle into `expected`, naming the first layer
    /// whose shape differs.
    pub fn bundle_into(&self, expected: &BundleArch) -> Result<ModelBundle> {
        let stored = self.bundle()?;
        if std::mem::discriminant(&stored.arch.meta) != std::mem::discriminant(&expected.meta) {
            return Err(Error::Architecture("meta block kind differs".into()));
        }
        if let (MetaBlockArch::IdEmbedding { keys: a, .. }, MetaBlockArch::IdEmbedding { keys: b, .. }) =
            (&stored.arch.meta, &expected.meta)
        {
            if a != b {
                return Err(Error::Architecture("id-embedding key sets differ".into()));
            }
        }
        if stored.arch.wiring != expected.wiring {
            return Err(Error::Architecture("block wiring differs".into()));
        }
        expected
            .check_meta(&stored.meta)
            .map_err(|e| Error::Architecture(format!("meta block: {e}")))?;
        expected
            .global
            .check_params(&stored.global)
            .map_err(|e| Error::Architecture(format!("global block: {e}")))?;
        ModelBundle::new(expected.clone(), stored.meta, stored.global)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::format(origin, format!("not a checkpoint (format `{}`)", c.format)));
        }
        if c.format_version != CHECKPOINT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported checkpoint version {}", c.format_version),
            ));
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn write_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint.validate()?;
    write_atomic(path, checkpoint.to_json()?.as_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    Checkpoint::from_json(&text, path)
}
