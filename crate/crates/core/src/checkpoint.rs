//! Versioned JSON snapshots of encoder parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Activation, Dense, DualEncoder, EncoderParams};
use crate::error::{Error, Result};
use crate::memtrace::{self, Category};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Row-major `[in_dim × out_dim]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerRecord {
    pub input_dim: usize,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub anchor: TowerRecord,
    /// Absent for tied towers.
    pub target: Option<TowerRecord>,
}

fn tower<T: Scalar>(e: &EncoderParams<T>) -> TowerRecord {
    TowerRecord {
        input_dim: e.input_dim(),
        layers: e
            .layers()
            .iter()
            .map(|l| LayerRecord {
                in_dim: l.weight.rows(),
                out_dim: l.weight.cols(),
                activation: l.activation,
                weight: l.weight.to_f64_vec(),
                bias: l.bias.to_f64_vec(),
            })
            .collect(),
    }
}

fn restore<T: Scalar>(r: &TowerRecord) -> Result<EncoderParams<T>> {
    let layers = memtrace::in_category(Category::Parameters, || {
        r.layers
            .iter()
            .map(|l| {
                let conv = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<_>>();
                Ok(Dense {
                    weight: Tensor::from_vec(vec![l.in_dim, l.out_dim], conv(&l.weight))?,
                    bias: Tensor::from_vec(vec![l.out_dim], conv(&l.bias))?,
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    EncoderParams::new(r.input_dim, layers)
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &DualEncoder<T>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            anchor: tower(&model.anchor),
            target: model.target.as_ref().map(tower),
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<DualEncoder<T>> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let anchor = restore(&self.anchor)?;
        match &self.target {
            Some(t) => DualEncoder::new(anchor, restore(t)?),
            None => Ok(DualEncoder::tied(anchor)),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}
