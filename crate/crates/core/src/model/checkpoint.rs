use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams, NumericNorm};
use crate::grammar::Vocabulary;
use crate::records::Schema;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT: &str = "ehrgen-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned, self-describing container for a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub schema_hash: String,
    pub schema: Schema,
    /// Token strings by id; also written next to the checkpoint as `vocab.txt`.
    pub vocab: Vec<String>,
    pub config: ModelConfig,
    pub numeric_norm: NumericNorm,
    pub tensors: BTreeMap<String, Matrix<T>>,
}

fn scalar_name<T: Scalar>() -> String {
    format!("f{}", 8 * std::mem::size_of::<T>())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &ModelParams<T>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: scalar_name::<T>(),
            schema_hash: model.schema_hash(),
            schema: (**model.schema()).clone(),
            vocab: model.vocab().tokens().to_vec(),
            config: model.config().clone(),
            numeric_norm: model.numeric_norm().clone(),
            tensors: model.params().to_named(),
        }
    }

    pub fn into_model(self) -> Result<ModelParams<T>, ModelError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format {} version {}", self.format, self.version)));
        }
        if self.scalar != scalar_name::<T>() {
            return Err(ModelError::Checkpoint(format!("checkpoint holds {} weights, requested {}", self.scalar, scalar_name::<T>())));
        }
        if self.schema.hash() != self.schema_hash {
            return Err(ModelError::SchemaMismatch { model: self.schema_hash, data: self.schema.hash() });
        }
        Vocabulary::from_tokens(&self.schema, &self.vocab)?;
        ModelParams::from_parts(self.config, Arc::new(self.schema), self.numeric_norm, &self.tensors)
    }
}

pub fn save_checkpoint<T: Scalar>(model: &ModelParams<T>, path: &Path) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ModelError::Checkpoint(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer(&mut w, &Checkpoint::from_model(model)).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(b"\n").map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>, ModelError> {
    let file = File::open(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let ckpt: Checkpoint<T> = serde_json::from_reader(BufReader::new(file)).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    ckpt.into_model()
}
