//! Parameter checkpoints.
//!
//! A checkpoint is a single JSON document:
//!
//! ```json
//! {
//!   "format": "ntg-params",
//!   "format_version": 1,
//!   "seed": 42,
//!   "meta": { ... model configuration ... },
//!   "tensors": [ { "name": "enc.0.w", "shape": [64, 49], "values": [ ... ] } ]
//! }
//! ```
//!
//! Values are written with shortest round-trip formatting and parsed with
//! exact float parsing, so save/load is lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModuleParams, NnError, ParamTensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "ntg-params";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub format_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<CheckpointTensor>,
}

impl Checkpoint {
    pub fn from_params(params: &ModuleParams, meta: serde_json::Value) -> Self {
        Self {
            format: FORMAT_TAG.to_string(),
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed: params.seed(),
            meta,
            tensors: params
                .tensors()
                .iter()
                .map(|t| CheckpointTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    values: t.values.clone(),
                })
                .collect(),
        }
    }

    pub fn to_params(&self) -> Result<ModuleParams, NnError> {
        if self.format != FORMAT_TAG {
            return Err(NnError::Checkpoint(format!("unexpected format tag `{}`", self.format)));
        }
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported format version {}", self.format_version)));
        }
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let n: usize = t.shape.iter().product();
                if n != t.values.len() {
                    return Err(NnError::Checkpoint(format!(
                        "tensor `{}` has shape {:?} but {} values",
                        t.name,
                        t.shape,
                        t.values.len()
                    )));
                }
                Ok(ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    values: t.values.clone(),
                    grad: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        ModuleParams::from_tensors(self.seed, tensors)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        serde_json::from_str(text).map_err(|e| NnError::Checkpoint(e.to_string()))
    }
}

pub fn save_checkpoint(path: &Path, params: &ModuleParams, meta: serde_json::Value) -> Result<(), NnError> {
    let ck = Checkpoint::from_params(params, meta);
    fs::write(path, ck.to_json()).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let text = fs::read_to_string(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn json_round_trip_is_lossless(values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..40), seed in any::<u64>()) {
            let mut p = ModuleParams::new(seed);
            p.add_tensor("t", vec![values.len()], values.clone()).unwrap();
            let text = Checkpoint::from_params(&p, serde_json::json!({"k": 1})).to_json();
            let back = Checkpoint::from_json(&text).unwrap().to_params().unwrap();
            prop_assert_eq!(back.tensors()[0].values.clone(), values);
            prop_assert_eq!(back.seed(), seed);
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let p = ModuleParams::new(1);
        let mut ck = Checkpoint::from_params(&p, serde_json::Value::Null);
        ck.format_version = 99;
        assert!(matches!(ck.to_params(), Err(NnError::Checkpoint(_))));
    }
}
