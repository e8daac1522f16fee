//! Named-network container stored as JSON.
//!
//! `f64` values are written in shortest round-trip form and parsed back
//! exactly, so a save/load cycle reproduces parameters bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mlp, NetParams, NetSpec};
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;

const FORMAT: &str = "milestone-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredNet {
    pub spec: NetSpec,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub networks: BTreeMap<String, StoredNet>,
    /// Free-form numeric metadata (normalizers, planner dimensions, ...).
    pub meta: BTreeMap<String, Vec<f64>>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            networks: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<S: Scalar>(&mut self, name: &str, net: &Mlp<S>) {
        self.networks.insert(
            name.to_string(),
            StoredNet {
                spec: net.spec.clone(),
                params: net.params.to_flat().into_iter().map(S::widen).collect(),
            },
        );
    }

    pub fn network<S: Scalar>(&self, name: &str) -> Result<Mlp<S>> {
        let stored = self
            .networks
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no network named {name:?}")))?;
        let flat: Vec<S> = stored.params.iter().map(|&v| S::of(v)).collect();
        Mlp::new(stored.spec.clone(), NetParams::from_flat(&stored.spec, &flat)?)
    }

    pub fn set_meta(&mut self, key: &str, values: Vec<f64>) {
        self.meta.insert(key.to_string(), values);
    }

    pub fn meta(&self, key: &str) -> Result<&[f64]> {
        self.meta
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("checkpoint has no metadata {key:?}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: byte_offset(text, e.line(), e.column()),
            msg: e.to_string(),
        })?;
        if ckpt.format != FORMAT || ckpt.version != VERSION {
            return config_err(format!(
                "unsupported checkpoint format {:?} v{}",
                ckpt.format, ckpt.version
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}
