//! Checkpoints: one safetensors archive holding the weights (keyed by layer
//! path) and a JSON header in the archive metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{BackboneSpec, Classifier, ModelConfig, Normalization};
use crate::error::{Error, Result};

const HEADER_KEY: &str = "foamqc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub backbone: BackboneSpec,
    pub normalization: Normalization,
    pub epoch: usize,
    #[serde(default)]
    pub metrics: serde_json::Value,
    pub spec_hash: String,
}

/// Serializes the classifier's weights (as f32) with a header.
pub fn checkpoint_bytes(clf: &Classifier, epoch: usize, metrics: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: clf.config.clone(),
        backbone: clf.net.spec().clone(),
        normalization: clf.norm,
        epoch,
        metrics,
        spec_hash: clf.net.spec().spec_hash(),
    };
    let tensors = clf
        .net
        .named_tensors()?
        .into_iter()
        .map(|(n, t)| Ok((n, t.to_dtype(DType::F32)?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header)?)]);
    safetensors::serialize(tensors, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(path: &Path, clf: &Classifier, epoch: usize, metrics: serde_json::Value) -> Result<()> {
    crate::write_atomic(path, &checkpoint_bytes(clf, epoch, metrics)?)
}

pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint("archive has no header".into()))?;
    let header: CheckpointHeader = serde_json::from_str(raw)?;
    if header.backbone.spec_hash() != header.spec_hash {
        return Err(Error::Checkpoint("header spec hash does not match its backbone".into()));
    }
    Ok(header)
}

/// Rebuilds a classifier from checkpoint bytes. With `expected`, the stored
/// architecture must hash to the same value.
pub fn classifier_from_bytes(bytes: &[u8], expected: Option<&BackboneSpec>, dtype: DType) -> Result<(Classifier, CheckpointHeader)> {
    let header = read_header(bytes)?;
    if let Some(spec) = expected {
        if spec.spec_hash() != header.spec_hash {
            return Err(Error::Checkpoint(format!(
                "spec hash mismatch: checkpoint {} vs model {}",
                &header.spec_hash[..12],
                &spec.spec_hash()[..12]
            )));
        }
    }
    let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
    let clf = Classifier::new(&header.backbone, header.config.clone(), header.normalization, dtype, 0)?;
    clf.net.load_tensors(&tensors)?;
    Ok((clf, header))
}

pub fn load_checkpoint(path: &Path, expected: Option<&BackboneSpec>) -> Result<(Classifier, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    classifier_from_bytes(&bytes, expected, DType::F32)
}

/// Reads a plain safetensors weight file (e.g. exported reference weights).
pub fn load_weights(path: &Path) -> Result<HashMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?)
}
