use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{DgcnModel, DynamicsModel, EpnnModel, GpModel, Linearization, PredictiveGaussian};
use crate::exec::Execution;
use crate::numerics::Matrix;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnyModel {
    Gp(GpModel),
    Dgcn(DgcnModel),
    Epnn(EpnnModel),
}

impl AnyModel {
    fn inner(&self) -> &dyn DynamicsModel {
        match self {
            AnyModel::Gp(m) => m,
            AnyModel::Dgcn(m) => m,
            AnyModel::Epnn(m) => m,
        }
    }

    /// Restore caches that are not serialized.
    pub fn rebuild(&mut self) -> Result<()> {
        match self {
            AnyModel::Gp(m) => m.rebuild(),
            AnyModel::Dgcn(m) => m.rebuild(),
            AnyModel::Epnn(_) => Ok(()),
        }
    }
}

impl DynamicsModel for AnyModel {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner().output_dim()
    }

    fn predict(&self, x: &Matrix) -> Result<Vec<PredictiveGaussian>> {
        self.inner().predict(x)
    }

    fn linearize(&self, x: &Matrix, exec: Execution) -> Result<Vec<Linearization>> {
        self.inner().linearize(x, exec)
    }
}

#[derive(Serialize, Deserialize)]
struct Container<T> {
    format_version: u32,
    payload: T,
}

/// Write any serializable value inside a versioned JSON container.
pub fn write_checkpoint<T: Serialize>(path: &Path, payload: &T) -> Result<()> {
    let text = serde_json::to_string(&Container { format_version: CHECKPOINT_VERSION, payload })?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_checkpoint<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    match v.get("format_version").and_then(|v| v.as_u64()) {
        Some(n) if n == u64::from(CHECKPOINT_VERSION) => {}
        other => return Err(Error::Format(format!("unsupported checkpoint version {other:?}"))),
    }
    let c: Container<T> = serde_json::from_value(v)?;
    Ok(c.payload)
}

pub fn save_model(path: &Path, model: &AnyModel) -> Result<()> {
    write_checkpoint(path, model)
}

pub fn load_model(path: &Path) -> Result<AnyModel> {
    let mut m: AnyModel = read_checkpoint(path)?;
    m.rebuild()?;
    Ok(m)
}
