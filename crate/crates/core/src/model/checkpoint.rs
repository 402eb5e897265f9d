use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, Model, TrainConfig, Variant};
use crate::error::{FormatError, Result};
use crate::format::{self, ByteReader, ByteWriter};
use crate::intervention::PercentileTable;
use crate::nn::{MlpSpec, ParamEntry, ParamStore};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"SCBMCKPT";
pub const CKPT_VERSION: u32 = 1;

/// A trained model with everything needed to predict and intervene.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub percentiles: PercentileTable,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    variant: Variant,
    concepts: usize,
    backbone: MlpSpec,
    config: TrainConfig,
    percentiles: PercentileTable,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    params: Vec<TensorMeta>,
}

impl Checkpoint {
    pub fn variant(&self) -> Variant {
        self.model.variant
    }

    /// Parameter tensors go to the binary payload in header order; everything
    /// else is JSON with round-trip float formatting.
    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.model.params.entries();
        let header = CheckpointHeader {
            variant: self.model.variant,
            concepts: self.model.concepts,
            backbone: self.model.backbone.clone(),
            config: self.config.clone(),
            percentiles: self.percentiles.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            params: entries
                .iter()
                .map(|e| TensorMeta {
                    name: e.name.clone(),
                    rows: e.value.rows(),
                    cols: e.value.cols(),
                    trainable: e.trainable,
                })
                .collect(),
        };
        let mut w = ByteWriter::new();
        for e in entries {
            w.f64s(e.value.data());
        }
        format::encode(CKPT_MAGIC, CKPT_VERSION, &header, &w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (CheckpointHeader, _) = format::decode(bytes, CKPT_MAGIC, CKPT_VERSION)?;
        let mut r = ByteReader::new(&payload);
        let mut entries = Vec::with_capacity(h.params.len());
        for m in h.params {
            let data = r.f64s(m.rows * m.cols, &m.name)?;
            entries.push(ParamEntry {
                name: m.name,
                value: Tensor::from_vec(m.rows, m.cols, data),
                trainable: m.trainable,
            });
        }
        if r.remaining() != 0 {
            return Err(FormatError::Header(format!(
                "{} unexpected payload bytes",
                r.remaining()
            ))
            .into());
        }
        Ok(Checkpoint {
            model: Model {
                variant: h.variant,
                concepts: h.concepts,
                backbone: h.backbone,
                params: ParamStore::from_entries(entries),
            },
            config: h.config,
            percentiles: h.percentiles,
            history: h.history,
            best_epoch: h.best_epoch,
        })
    }

    /// SHA-256 of the serialized checkpoint, lowercase hex.
    pub fn hash(&self) -> String {
        format::sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
