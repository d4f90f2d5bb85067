//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form and parsed with correct rounding, so load(save(m)) == m bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelSpec, Standardizer};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "xil-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint {format} v{version}")]
    Unsupported { format: String, version: u32 },
    #[error("checkpoint parameters do not match the spec: {0}")]
    Corrupt(String),
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    spec: ModelSpec,
    seed: u64,
    step: u64,
    epochs: u64,
    standardizer: Option<Standardizer>,
    params: Vec<ParamRecord>,
}

impl Model {
    pub fn to_checkpoint_json(&self) -> Result<String, CheckpointError> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            step: self.step,
            epochs: self.epochs,
            standardizer: self.standardizer.clone(),
            params: self
                .param_names
                .iter()
                .zip(&self.params)
                .map(|(name, t)| ParamRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, CheckpointError> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Unsupported {
                format: file.format,
                version: file.version,
            });
        }
        let mut model = Model::init(file.spec, file.seed).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if model.params.len() != file.params.len() {
            return Err(CheckpointError::Corrupt(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                file.params.len()
            )));
        }
        for (slot, rec) in model.params.iter_mut().zip(file.params) {
            if slot.shape() != rec.shape.as_slice() {
                return Err(CheckpointError::Corrupt(format!("{}: shape {:?}", rec.name, rec.shape)));
            }
            *slot = Tensor::new(rec.shape, rec.values).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        }
        model.step = file.step;
        model.epochs = file.epochs;
        model.standardizer = file.standardizer;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, ModelSpec};
    use proptest::prelude::*;

    #[test]
    fn rejects_unknown_version() {
        let m = Model::init(ModelSpec::logreg(2, 2), 0).unwrap();
        let text = m.to_checkpoint_json().unwrap().replace("\"version\":1", "\"version\":9");
        assert!(matches!(Model::from_checkpoint_json(&text), Err(CheckpointError::Unsupported { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), step in any::<u64>(), scale in -1e6f64..1e6) {
            let spec = ModelSpec {
                architecture: Architecture::Cnn { conv_channels: vec![2, 3], kernel: 3, pool: 2, dense: vec![4] },
                input_shape: vec![1, 4, 4],
                classes: 2,
            };
            let mut m = Model::init(spec, seed).unwrap();
            m.step = step;
            m.params[0] = m.params[0].map(|v| v * scale / 3.0).unwrap();
            m.standardizer = Some(Standardizer { mean: vec![0.1; 16], std: vec![1.0 / 3.0; 16] });
            let back = Model::from_checkpoint_json(&m.to_checkpoint_json().unwrap()).unwrap();
            let bits = |m: &Model| m.params.iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&m));
            prop_assert_eq!(back, m);
        }
    }
}
