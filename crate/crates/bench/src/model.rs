//! The trainable model behind each mode and its on-disk form.

use std::path::Path;

use gradcache::encoder::encode;
use gradcache::{Checkpoint, DeepModel, DistanceHead, DualEncoder, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::error::{BenchError, Result};

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub enum TrainedModel {
    Dual(DualEncoder<f64>),
    Deep(DeepModel<f64>),
}

impl TrainedModel {
    /// Seeded initial model for `config`.
    pub fn init(config: &RunConfig) -> Result<Self> {
        let dims = config.encoder_dims();
        let encoders = DualEncoder::init(config.seed, &dims, &dims, config.activation)?;
        Ok(match config.mode {
            Mode::Deep => {
                let head = DistanceHead::mlp(config.seed.wrapping_add(0x5eed), config.dim, config.head_hidden)?;
                TrainedModel::Deep(DeepModel::new(encoders, head))
            }
            _ => TrainedModel::Dual(encoders),
        })
    }

    pub fn encoders(&self) -> &DualEncoder<f64> {
        match self {
            TrainedModel::Dual(m) => m,
            TrainedModel::Deep(m) => &m.encoders,
        }
    }

    pub fn params(&self) -> Vec<Tensor<f64>> {
        match self {
            TrainedModel::Dual(m) => m.params(),
            TrainedModel::Deep(m) => m.params(),
        }
    }

    /// `[n_anchors × n_targets]` scores, dot product or the learned head.
    pub fn scores(&self, anchors: &Tensor<f64>, targets: &Tensor<f64>) -> Result<Tensor<f64>> {
        let enc = self.encoders();
        let f = encode(&enc.anchor, anchors, false)?;
        let g = encode(enc.target_encoder(), targets, false)?;
        let s = match self {
            TrainedModel::Dual(_) => DistanceHead::DotProduct.scores(&f, &g)?,
            TrainedModel::Deep(m) => m.head.scores(&f, &g)?,
        };
        Ok(s)
    }

    pub fn to_file(&self) -> ModelFile {
        let head = match self {
            TrainedModel::Deep(DeepModel { head: DistanceHead::Mlp(h), .. }) => Some(HeadRecord {
                d: h.w1.rows() / 2,
                hidden: h.w1.cols(),
                w1: h.w1.to_f64_vec(),
                b1: h.b1.to_f64_vec(),
                w2: h.w2.to_f64_vec(),
                b2: h.b2.to_f64_vec(),
            }),
            _ => None,
        };
        ModelFile { version: MODEL_FILE_VERSION, encoders: Checkpoint::from_model(self.encoders()), head }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        if file.version != MODEL_FILE_VERSION {
            return Err(BenchError::Encode(format!("unsupported model file version {}", file.version)));
        }
        let encoders: DualEncoder<f64> = file.encoders.to_model()?;
        let Some(h) = &file.head else {
            return Ok(TrainedModel::Dual(encoders));
        };
        let template = DistanceHead::<f64>::mlp(0, h.d, h.hidden)?;
        let params = vec![
            Tensor::from_vec(vec![2 * h.d, h.hidden], h.w1.clone())?,
            Tensor::from_vec(vec![h.hidden], h.b1.clone())?,
            Tensor::from_vec(vec![h.hidden, 1], h.w2.clone())?,
            Tensor::from_vec(vec![1], h.b2.clone())?,
        ];
        Ok(TrainedModel::Deep(DeepModel::new(encoders, template.with_params(params)?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_file()).map_err(|e| BenchError::Encode(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| BenchError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| BenchError::Encode(format!("{}: {e}", path.display())))?;
        Self::from_file(&file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub d: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub encoders: Checkpoint,
    pub head: Option<HeadRecord>,
}
