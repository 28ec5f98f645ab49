//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (model kind, training objective, creation seed, config record and
//! tensor names/shapes), then every tensor's values as little-endian `f64`
//! in header order. Values are stored as raw bits, so round trips are exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MlpConfig, MlpWeights, ModelConfig, ModelWeights, NamedTensor, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::train::Objective;

const MAGIC: &[u8; 8] = b"CPICLCKP";
pub const FORMAT_VERSION: u32 = 1;

/// A trained model of either family.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Icl(ModelWeights),
    Mlp(MlpWeights),
}

impl TrainedModel {
    pub fn store(&self) -> &dyn ParamStore {
        match self {
            Self::Icl(w) => w,
            Self::Mlp(w) => w,
        }
    }

    pub fn store_mut(&mut self) -> &mut dyn ParamStore {
        match self {
            Self::Icl(w) => w,
            Self::Mlp(w) => w,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Icl(_) => "icl",
            Self::Mlp(_) => "mlp",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub objective: Objective,
    pub model: TrainedModel,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ConfigRecord {
    Icl { config: ModelConfig },
    Mlp { config: MlpConfig },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    objective: Objective,
    seed: u64,
    model: ConfigRecord,
    tensors: Vec<TensorMeta>,
}

impl Checkpoint {
    pub fn new(objective: Objective, model: TrainedModel) -> Self {
        Self { objective, model }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let (model, seed) = match &self.model {
            TrainedModel::Icl(m) => (ConfigRecord::Icl { config: m.config().clone() }, m.seed()),
            TrainedModel::Mlp(m) => (ConfigRecord::Mlp { config: m.config().clone() }, m.seed()),
        };
        let params = self.model.store().params();
        let header = Header {
            objective: self.objective,
            seed,
            model,
            tensors: params
                .iter()
                .map(|p| TensorMeta {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in params {
            for v in p.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let len = usize::try_from(u64::from_le_bytes(u64buf))
            .map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;

        let mut params = Vec::with_capacity(header.tensors.len());
        for meta in header.tensors {
            let numel: usize = meta.shape.iter().product();
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(NamedTensor {
                name: meta.name,
                tensor: Tensor::new(meta.shape, data)?,
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        let model = match header.model {
            ConfigRecord::Icl { config } => {
                TrainedModel::Icl(ModelWeights::from_params(config, header.seed, params)?)
            }
            ConfigRecord::Mlp { config } => {
                TrainedModel::Mlp(MlpWeights::from_params(config, header.seed, params)?)
            }
        };
        if !model.store().all_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            objective: header.objective,
            model,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}
